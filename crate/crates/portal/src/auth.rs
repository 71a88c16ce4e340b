//! Accounts and session tokens kept as files under `<store>/users` and
//! `<store>/sessions`.

use std::path::{Path, PathBuf};

use argon2::password_hash::phc::PasswordHash;
use argon2::password_hash::{PasswordHasher, PasswordVerifier};
use argon2::Argon2;
use chrono::{DateTime, TimeDelta, Utc};
use rand::Rng;
use rrc_core::fsutil;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const SESSION_LIFETIME: TimeDelta = TimeDelta::days(30);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccountRole {
    User,
    Organizer,
    Admin,
}

impl AccountRole {
    pub fn organizes(self) -> bool {
        self >= AccountRole::Organizer
    }
}

impl std::str::FromStr for AccountRole {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "user" => Ok(AccountRole::User),
            "organizer" => Ok(AccountRole::Organizer),
            "admin" => Ok(AccountRole::Admin),
            other => Err(format!("unknown role {other:?}")),
        }
    }
}

/// Stored account. Never serialized into API responses; see [`UserView`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UserAccount {
    pub id: String,
    pub email: String,
    pub display_name: String,
    pub password_hash: String,
    pub role: AccountRole,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserView {
    pub id: String,
    pub email: String,
    pub display_name: String,
    pub role: AccountRole,
}

impl From<&UserAccount> for UserView {
    fn from(u: &UserAccount) -> Self {
        UserView {
            id: u.id.clone(),
            email: u.email.clone(),
            display_name: u.display_name.clone(),
            role: u.role,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Session {
    user: String,
    expires_at: DateTime<Utc>,
}

#[derive(Debug, Error)]
pub enum AuthError {
    #[error("email {0:?} is already registered")]
    EmailTaken(String),
    #[error("invalid email address")]
    InvalidEmail,
    #[error("password must be at least 8 characters")]
    WeakPassword,
    #[error("display name must be 1 to 80 printable characters")]
    InvalidName,
    #[error("wrong email or password")]
    BadCredentials,
    #[error("password hashing failed: {0}")]
    Hash(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("corrupt account file: {0}")]
    Corrupt(String),
}

fn digest(s: &str) -> String {
    hex::encode(Sha256::digest(s.as_bytes()))
}

#[derive(Debug, Clone)]
pub struct UserStore {
    users: PathBuf,
    sessions: PathBuf,
}

impl UserStore {
    pub fn new(store: &Path) -> Self {
        UserStore {
            users: store.join("users"),
            sessions: store.join("sessions"),
        }
    }

    fn read<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Option<T>, AuthError> {
        match fsutil::read_opt(path)? {
            None => Ok(None),
            Some(b) => serde_json::from_slice(&b)
                .map(Some)
                .map_err(|e| AuthError::Corrupt(format!("{}: {e}", path.display()))),
        }
    }

    pub fn register(&self, email: &str, display_name: &str, password: &str, role: AccountRole) -> Result<UserAccount, AuthError> {
        let email = email.trim().to_lowercase();
        let at = email.find('@');
        if at.is_none_or(|i| i == 0 || i + 1 == email.len()) || email.len() > 254 || email.contains(char::is_whitespace) {
            return Err(AuthError::InvalidEmail);
        }
        let name = display_name.trim();
        if name.is_empty() || name.chars().count() > 80 || name.chars().any(char::is_control) {
            return Err(AuthError::InvalidName);
        }
        if password.chars().count() < 8 {
            return Err(AuthError::WeakPassword);
        }
        let hash = Argon2::default()
            .hash_password(password.as_bytes())
            .map_err(|e| AuthError::Hash(e.to_string()))?
            .to_string();
        let id = format!("u{}", fsutil::nonce());
        // The email index entry is the uniqueness guard; the account file
        // is only written once it is won.
        if !fsutil::create_exclusive(&self.users.join("by-email").join(digest(&email)), id.as_bytes())? {
            return Err(AuthError::EmailTaken(email));
        }
        let account = UserAccount {
            id: id.clone(),
            email,
            display_name: name.to_string(),
            password_hash: hash,
            role,
            created_at: Utc::now(),
        };
        fsutil::write_atomic(&self.users.join(format!("{id}.json")), &json_bytes(&account))?;
        Ok(account)
    }

    pub fn get(&self, id: &str) -> Result<Option<UserAccount>, AuthError> {
        if id.is_empty() || !id.bytes().all(|b| b.is_ascii_alphanumeric()) {
            return Ok(None);
        }
        Self::read(&self.users.join(format!("{id}.json")))
    }

    pub fn by_email(&self, email: &str) -> Result<Option<UserAccount>, AuthError> {
        let key = self.users.join("by-email").join(digest(&email.trim().to_lowercase()));
        match fsutil::read_opt(&key)? {
            None => Ok(None),
            Some(id) => self.get(String::from_utf8_lossy(&id).trim()),
        }
    }

    /// Checks credentials and issues a session token.
    pub fn login(&self, email: &str, password: &str) -> Result<(String, UserAccount, DateTime<Utc>), AuthError> {
        let user = self.by_email(email)?.ok_or(AuthError::BadCredentials)?;
        let parsed = PasswordHash::new(&user.password_hash).map_err(|e| AuthError::Hash(e.to_string()))?;
        Argon2::default()
            .verify_password(password.as_bytes(), &parsed)
            .map_err(|_| AuthError::BadCredentials)?;
        let token: [u8; 32] = rand::rng().random();
        let token = hex::encode(token);
        let expires_at = Utc::now() + SESSION_LIFETIME;
        let s = Session {
            user: user.id.clone(),
            expires_at,
        };
        fsutil::write_atomic(&self.sessions.join(format!("{}.json", digest(&token))), &json_bytes(&s))?;
        Ok((token, user, expires_at))
    }

    /// Account behind a bearer token, if the session is live.
    pub fn authenticate(&self, token: &str) -> Result<Option<UserAccount>, AuthError> {
        if token.len() != 64 || !token.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Ok(None);
        }
        let path = self.sessions.join(format!("{}.json", digest(token)));
        let Some(s) = Self::read::<Session>(&path)? else {
            return Ok(None);
        };
        if s.expires_at < Utc::now() {
            let _ = std::fs::remove_file(&path);
            return Ok(None);
        }
        self.get(&s.user)
    }
}

fn json_bytes<T: Serialize>(v: &T) -> Vec<u8> {
    let mut b = serde_json::to_vec_pretty(v).expect("serializable");
    b.push(b'\n');
    b
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn register_login_authenticate() {
        let dir = tempfile::tempdir().unwrap();
        let users = UserStore::new(dir.path());
        let u = users.register("Ann@Example.org", "Ann", "correct horse", AccountRole::User).unwrap();
        assert!(u.password_hash.starts_with("$argon2id$"));
        assert!(matches!(
            users.register("ann@example.org", "Other", "password1", AccountRole::User),
            Err(AuthError::EmailTaken(_))
        ));
        assert!(matches!(users.login("ann@example.org", "wrong pass"), Err(AuthError::BadCredentials)));
        let (token, who, exp) = users.login("ann@example.org", "correct horse").unwrap();
        assert_eq!(who.id, u.id);
        assert!(exp > Utc::now() + TimeDelta::days(29));
        assert_eq!(users.authenticate(&token).unwrap().unwrap().id, u.id);
        assert!(users.authenticate(&"0".repeat(64)).unwrap().is_none());
        let view = serde_json::to_string(&UserView::from(&who)).unwrap();
        assert!(!view.contains("argon2"));
    }

    #[test]
    fn rejects_bad_input() {
        let dir = tempfile::tempdir().unwrap();
        let users = UserStore::new(dir.path());
        assert!(matches!(users.register("nope", "A", "password1", AccountRole::User), Err(AuthError::InvalidEmail)));
        assert!(matches!(users.register("a@b", "A", "short", AccountRole::User), Err(AuthError::WeakPassword)));
        assert!(matches!(users.register("a@b", " ", "password1", AccountRole::User), Err(AuthError::InvalidName)));
    }
}
