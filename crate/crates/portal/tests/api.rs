mod common;

use std::process::Command;

use base64::Engine;
use chrono::{TimeZone, Utc};
use common::*;
use reqwest::Method;
use rrc_core::datastore::{AnnotationNode, Granularity, Region};
use rrc_core::evalservice::{SubmissionRecord, SubmissionStore, Visibility};
use rrc_core::geometry::{rectification_homography, Quad};
use rrc_core::ingest::ValidationReport;
use rrc_core::synth;
use rrc_portal::api::PortalConfig;
use serde_json::{json, Value};

fn status_of(api: &Api, sid: &str, token: &str) -> Value {
    api.req(Method::GET, &format!("/submissions/{sid}"), Some(token))
        .send()
        .unwrap()
        .json::<Value>()
        .unwrap()["status"]
        .clone()
}

#[test]
fn register_upload_evaluate_rank() {
    let w = World::new(1);
    let api = Api::new(&w.serve());

    let r = api
        .req(Method::POST, "/users", None)
        .json(&json!({"email": "carol@example.org", "display_name": "Carol", "password": PASSWORD}))
        .send()
        .unwrap();
    assert_eq!(r.status(), 201);
    let user: Value = r.json().unwrap();
    assert!(user.get("password_hash").is_none());
    let r = api
        .req(Method::POST, "/sessions", None)
        .json(&json!({"email": "carol@example.org", "password": PASSWORD}))
        .send()
        .unwrap();
    assert_eq!(r.status(), 201);
    let token = r.json::<Value>().unwrap()["token"].as_str().unwrap().to_string();
    let me: Value = api.req(Method::GET, "/me", Some(&token)).send().unwrap().json().unwrap();
    assert_eq!(me["id"], user["id"]);

    let archive = archive_for(&w.tasks, PUBLIC_TASK, 5);
    let r = api.upload(PUBLIC_TASK, Some(&token), archive.clone(), "Method A");
    assert_eq!(r.status(), 202);
    let body: Value = r.json().unwrap();
    let sid = body["id"].as_str().unwrap().to_string();
    assert_eq!(body["status"], json!({"iou": "pending", "e2e": "pending"}));

    // Not evaluated yet: no ranking row even for the owner.
    let rows: Value = api
        .req(Method::GET, "/tasks/loc/rankings?protocol=iou", Some(&token))
        .send()
        .unwrap()
        .json()
        .unwrap();
    assert_eq!(rows["rows"], json!([]));

    assert_eq!(w.run_jobs().completed, 2);
    assert_eq!(status_of(&api, &sid, &token), json!({"iou": "done", "e2e": "done"}));

    let r = api
        .req(Method::PUT, &format!("/submissions/{sid}/visibility"), Some(&token))
        .json(&json!({"visibility": "public"}))
        .send()
        .unwrap();
    assert_eq!(r.status(), 200);

    // Offline CLI on the same snapshot and archive.
    let t = w.tasks.task(PUBLIC_TASK).unwrap();
    let gt = w.tasks.snapshot_path(PUBLIC_TASK, t.snapshot.as_ref().unwrap());
    let subm = w.dir.path().join("subm.zip");
    std::fs::write(&subm, &archive).unwrap();
    for (protocol, kind) in [("iou", "iou"), ("e2e", "e2e")] {
        let out = w.dir.path().join(format!("cli-{protocol}"));
        let st = Command::new(BIN)
            .args(["eval", "--gt"])
            .arg(&gt)
            .arg("--subm")
            .arg(&subm)
            .args(["--protocol", kind, "--format", "quad+transcription", "-o"])
            .arg(&out)
            .output()
            .unwrap();
        assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
        let cli_bytes = std::fs::read(out.join("overall.json")).unwrap();
        let cli: Value = serde_json::from_slice(&cli_bytes).unwrap();

        let text = api
            .req(Method::GET, &format!("/tasks/loc/rankings?protocol={protocol}"), None)
            .send()
            .unwrap()
            .text()
            .unwrap();
        let rows: Value = serde_json::from_str(&text).unwrap();
        let row = &rows["rows"][0];
        assert_eq!(row["submission"], json!(sid));
        assert_eq!(row["private"], json!(false));
        for k in ["precision", "recall", "hmean"] {
            assert_eq!(row[k], cli[k], "{protocol} {k}");
            // Same digits, not just the same value.
            assert!(text.contains(&format!("\"{k}\":{}", cli[k])), "{k} digits");
        }
        let served = api
            .req(Method::GET, &format!("/submissions/{sid}/results/{protocol}"), None)
            .send()
            .unwrap()
            .bytes()
            .unwrap();
        assert_eq!(&served[..], &cli_bytes[..], "served overall.json equals CLI output");
    }

    // Early rejection carries file and line.
    let r = api.upload(PUBLIC_TASK, Some(&token), broken_archive(&w.tasks, PUBLIC_TASK), "Broken");
    assert_eq!(r.status(), 422);
    let body: Value = r.json().unwrap();
    assert_eq!(body["error"], "ValidationFailed");
    let e = &body["errors"][0];
    assert!(e["file"].as_str().unwrap().starts_with("res_"));
    assert_eq!(e["line"], 2);
    assert!(e["code"].is_string());

    // Anonymous upload and unknown task.
    assert_eq!(api.upload(PUBLIC_TASK, None, archive.clone(), "x").status(), 401);
    assert_eq!(api.upload("nope", Some(&token), archive, "x").status(), 404);
}

#[test]
fn oversize_upload_is_413() {
    let w = World::new(2);
    let api = Api::new(&serve_in_process(
        &w.store,
        PortalConfig {
            max_upload: 4096,
            bundle_exe: None,
        },
    ));
    let big: Vec<u8> = (0..20_000u32).map(|i| (i * 7919 % 251) as u8).collect();
    let r = api.upload(PUBLIC_TASK, Some(&w.alice.token), big, "Big");
    assert_eq!(r.status(), 413);
}

/// Stores an evaluated submission with hand-written scores.
fn fake_result(w: &World, owner: &str, method: &str, day: u32, hour: u32, h: &str, visibility: Visibility) -> String {
    let subs = SubmissionStore::new(&w.store);
    let t = w.tasks.task(PUBLIC_TASK).unwrap();
    let rec = SubmissionRecord {
        id: SubmissionStore::new_id(),
        task: PUBLIC_TASK.into(),
        owner: owner.into(),
        method: method.into(),
        description: String::new(),
        uploaded_at: Utc.with_ymd_and_hms(2024, 3, day, hour, 0, 0).unwrap(),
        visibility,
        snapshot: t.snapshot.unwrap(),
        protocols: vec!["iou".into()],
        validation: ValidationReport {
            ok: true,
            ..Default::default()
        },
    };
    subs.create(&rec, b"not used").unwrap();
    let overall = format!("{{\n  \"precision\": 0.500000,\n  \"recall\": 0.250000,\n  \"hmean\": {h}\n}}\n");
    subs.commit_results(&rec.id, "iou", &[("overall.json".into(), overall.into_bytes())])
        .unwrap();
    rec.id
}

#[test]
fn rankings_and_state_of_the_art() {
    let w = World::new(3);
    let api = Api::new(&w.serve());
    let sota = |api: &Api| -> Vec<(String, String)> {
        let v: Value = api.req(Method::GET, "/tasks/loc/sota?protocol=iou", None).send().unwrap().json().unwrap();
        v["series"]
            .as_array()
            .unwrap()
            .iter()
            .map(|p| (p["date"].as_str().unwrap().to_string(), p["hmean"].to_string()))
            .collect()
    };
    assert!(sota(&api).is_empty());

    let a = fake_result(&w, &w.alice.id, "A", 1, 9, "0.500000", Visibility::Public);
    let b = fake_result(&w, &w.alice.id, "B", 2, 9, "0.400000", Visibility::Public);
    let c = fake_result(&w, &w.bob.id, "C", 3, 9, "0.700000", Visibility::Public);
    // Same day as C but lower; collapsed into C's day.
    fake_result(&w, &w.bob.id, "C2", 3, 10, "0.650000", Visibility::Public);
    let p = fake_result(&w, &w.bob.id, "Private", 4, 9, "0.990000", Visibility::Private);
    assert_eq!(
        sota(&api),
        vec![
            ("2024-03-01".to_string(), "0.5".to_string()),
            ("2024-03-02".to_string(), "0.5".to_string()),
            ("2024-03-03".to_string(), "0.7".to_string()),
        ]
    );

    // Ties on hmean go to the earlier upload.
    let d = fake_result(&w, &w.alice.id, "D", 5, 9, "0.780000", Visibility::Public);
    let e = fake_result(&w, &w.alice.id, "E", 4, 12, "0.780000", Visibility::Public);
    let f = fake_result(&w, &w.alice.id, "F", 6, 9, "0.820000", Visibility::Public);
    let order = |token: Option<&str>| -> Vec<(String, bool)> {
        let v: Value = api.req(Method::GET, "/tasks/loc/rankings?protocol=iou", token).send().unwrap().json().unwrap();
        v["rows"]
            .as_array()
            .unwrap()
            .iter()
            .map(|r| (r["submission"].as_str().unwrap().to_string(), r["private"].as_bool().unwrap()))
            .collect()
    };
    let public: Vec<(String, bool)> = [&f, &e, &d, &c]
        .iter()
        .map(|s| (s.to_string(), false))
        .chain(std::iter::once((w.bob.id.clone(), false)))
        .collect();
    let anon = order(None);
    assert_eq!(&anon[..4], &public[..4]);
    assert_eq!(anon.len(), 7, "private row hidden from anonymous");
    assert!(!anon.iter().any(|(s, _)| *s == p));
    assert_eq!(order(Some(&w.alice.token)).len(), 7);
    let bobs = order(Some(&w.bob.token));
    assert_eq!(bobs[0], (p.clone(), true), "owner sees own private row, marked");
    assert_eq!(bobs.len(), 8);
    assert!(anon.iter().any(|(s, _)| *s == a) && anon.iter().any(|(s, _)| *s == b));

    let r = api.req(Method::GET, "/tasks/loc/rankings?protocol=nope", None).send().unwrap();
    assert_eq!(r.status(), 404);
    let r = api.req(Method::GET, "/tasks/nope/rankings", None).send().unwrap();
    assert_eq!(r.status(), 404);
    let r = api.req(Method::GET, "/tasks/loc/sota?protocol=nope", None).send().unwrap();
    assert_eq!(r.status(), 404);
}

#[test]
fn per_sample_and_compare() {
    let w = World::new(4);
    let api = Api::new(&w.serve());
    let upload = |acct: &Account, seed: u64, name: &str| -> String {
        let r = api.upload(PUBLIC_TASK, Some(&acct.token), archive_for(&w.tasks, PUBLIC_TASK, seed), name);
        assert_eq!(r.status(), 202);
        r.json::<Value>().unwrap()["id"].as_str().unwrap().to_string()
    };
    let sa = upload(&w.alice, 10, "Alpha");
    let sb = upload(&w.bob, 11, "Beta");
    w.run_jobs();
    let image = &w.public_images[0];

    let r = api
        .req(Method::GET, &format!("/submissions/{sa}/samples/{image}?protocol=iou"), Some(&w.alice.token))
        .send()
        .unwrap();
    assert_eq!(r.status(), 200);
    let v: Value = r.json().unwrap();
    let sample = &v["sample"];
    for m in sample["matches"].as_array().unwrap() {
        assert!(m["iou"].as_f64().unwrap() >= 0.5);
    }
    assert!(v["gt"].as_array().unwrap().iter().all(|g| g["quad"].as_array().unwrap().len() == 8));
    let n_det = v["detections"].as_array().unwrap().len();
    let sample_ids = sample["matches"]
        .as_array()
        .unwrap()
        .iter()
        .flat_map(|m| m["det"].as_array().unwrap().clone())
        .chain(sample["unmatched_det"].as_array().unwrap().clone())
        .chain(sample["ignored_det"].as_array().unwrap().clone())
        .count();
    assert_eq!(sample_ids, n_det, "every detection accounted for");

    // Foreign private submission.
    let r = api
        .req(Method::GET, &format!("/submissions/{sb}/samples/{image}"), Some(&w.alice.token))
        .send()
        .unwrap();
    assert_eq!(r.status(), 403);
    let r = api
        .req(Method::GET, &format!("/tasks/loc/compare?ids={sa},{sb}&image={image}"), Some(&w.alice.token))
        .send()
        .unwrap();
    assert_eq!(r.status(), 403);

    let r = api
        .req(Method::PUT, &format!("/submissions/{sb}/visibility"), Some(&w.bob.token))
        .json(&json!({"visibility": "public"}))
        .send()
        .unwrap();
    assert_eq!(r.status(), 200);
    let v: Value = api
        .req(Method::GET, &format!("/tasks/loc/compare?ids={sb},{sa}&image={image}"), Some(&w.alice.token))
        .send()
        .unwrap()
        .json()
        .unwrap();
    let methods = v["methods"].as_array().unwrap();
    assert_eq!(methods.len(), 2);
    assert_eq!(methods[0]["submission"], json!(sb));
    assert_eq!(methods[1]["submission"], json!(sa));
    assert_eq!(methods[0]["sample"]["image"], json!(image));
    let v: Value = api
        .req(Method::GET, &format!("/tasks/loc/compare?ids=&image={image}"), None)
        .send()
        .unwrap()
        .json()
        .unwrap();
    assert_eq!(v["methods"], json!([]));
}

fn crop_png(b64: &str) -> image::RgbImage {
    let bytes = base64::engine::general_purpose::STANDARD.decode(b64).unwrap();
    image::load_from_memory(&bytes).unwrap().to_rgb8()
}

#[test]
fn preview_rectify() {
    let w = World::new(5);
    let api = Api::new(&w.serve());
    let image = &w.public_images[0];
    let src = image::load_from_memory(&w.ds.image_bytes(COLLECTION, image).unwrap()).unwrap().to_rgb8();

    let coords = [100.0, 50.0, 196.0, 50.0, 196.0, 82.0, 100.0, 82.0];
    let r = api
        .req(Method::POST, "/preview/rectify", Some(&w.bob.token))
        .json(&json!({"collection": COLLECTION, "image": image, "quad": coords}))
        .send()
        .unwrap();
    assert_eq!(r.status(), 200);
    let v: Value = r.json().unwrap();
    assert_eq!((v["width"].as_u64(), v["height"].as_u64()), (Some(192), Some(64)));
    let crop = crop_png(v["png_base64"].as_str().unwrap());
    for (x, y, px) in crop.enumerate_pixels() {
        assert_eq!(*px, *src.get_pixel(100 + x / 2, 50 + y / 2));
    }
    let expected = rectification_homography(&Quad::from_coords(&coords).unwrap(), 192.0, 64.0).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            let got = v["homography"]["m"][i][j].as_f64().unwrap();
            assert!((got - expected.m[i][j]).abs() <= 1e-9 * expected.m[i][j].abs().max(1.0));
        }
    }

    let bowtie = [0.0, 0.0, 10.0, 10.0, 10.0, 0.0, 0.0, 10.0];
    let r = api
        .req(Method::POST, "/preview/rectify", Some(&w.bob.token))
        .json(&json!({"collection": COLLECTION, "image": image, "quad": bowtie}))
        .send()
        .unwrap();
    assert_eq!(r.status(), 400);
    assert_eq!(r.json::<Value>().unwrap()["error"], "SelfIntersecting");

    let r = api
        .req(Method::POST, "/preview/rectify", Some(&w.alice.token))
        .json(&json!({"collection": COLLECTION, "image": image, "quad": coords}))
        .send()
        .unwrap();
    assert_eq!(r.status(), 403);
}

#[test]
fn annotation_workflow_over_http() {
    let w = World::new(6);
    let api = Api::new(&w.serve());
    let form = reqwest::blocking::multipart::Form::new().part(
        "image",
        reqwest::blocking::multipart::Part::bytes(synth::png(64, 48, 99)).file_name("new.png"),
    );
    let r = api
        .req(Method::POST, "/collections/scenes/images", Some(&w.organizer.token))
        .multipart(form)
        .send()
        .unwrap();
    assert_eq!(r.status(), 201);
    let iid = r.json::<Value>().unwrap()[0]["record"]["id"].as_str().unwrap().to_string();
    let base = format!("/collections/scenes/images/{iid}");

    let r = api.req(Method::POST, &format!("{base}/reserve"), Some(&w.bob.token)).json(&json!({})).send().unwrap();
    assert_eq!(r.status(), 200);
    let r = api
        .req(Method::POST, &format!("{base}/reserve"), Some(&w.organizer.token))
        .json(&json!({}))
        .send()
        .unwrap();
    assert_eq!(r.status(), 409);
    let body: Value = r.json().unwrap();
    assert_eq!(body["error"], "AlreadyReservedByOther");
    assert_eq!(body["holder"], json!(w.bob.id));

    let word = AnnotationNode::new(
        "w1",
        Granularity::Word,
        Region::Quad(Quad::axis_rect(5.0, 5.0, 40.0, 20.0).unwrap()),
    )
    .with_text("EXIT");
    let r = api
        .req(Method::PUT, &format!("{base}/annotation"), Some(&w.bob.token))
        .json(&json!({"tree": [word], "expected_head": 0, "note": "first pass"}))
        .send()
        .unwrap();
    assert_eq!(r.status(), 201);
    let r = api
        .req(Method::PUT, &format!("{base}/annotation"), Some(&w.bob.token))
        .json(&json!({"tree": [word], "expected_head": 0}))
        .send()
        .unwrap();
    assert_eq!(r.status(), 409);
    assert_eq!(r.json::<Value>().unwrap()["error"], "StaleHead");

    let rows: Value = api
        .req(Method::GET, &format!("/collections/scenes/dashboard?state=reserved&assignee={}", w.bob.id), Some(&w.bob.token))
        .send()
        .unwrap()
        .json()
        .unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 1);
    assert_eq!(rows[0]["image"], json!(iid));

    let r = api.req(Method::POST, &format!("{base}/submit"), Some(&w.bob.token)).send().unwrap();
    assert_eq!(r.status(), 200);
    let r = api
        .req(Method::POST, &format!("{base}/review"), Some(&w.bob.token))
        .json(&json!({"action": "approve", "rating": 4}))
        .send()
        .unwrap();
    assert_eq!(r.status(), 403, "contributors cannot review");
    let r = api
        .req(Method::POST, &format!("{base}/review"), Some(&w.organizer.token))
        .json(&json!({"action": "request_revision"}))
        .send()
        .unwrap();
    assert_eq!(r.status(), 400);
    assert_eq!(r.json::<Value>().unwrap()["error"], "CommentRequired");
    let r = api
        .req(Method::POST, &format!("{base}/review"), Some(&w.organizer.token))
        .json(&json!({"action": "approve", "rating": 4}))
        .send()
        .unwrap();
    assert_eq!(r.status(), 200);
    assert_eq!(r.json::<Value>().unwrap()["state"], "approved");

    let board: Value = api
        .req(Method::GET, &format!("{base}/verification/in-context"), Some(&w.bob.token))
        .send()
        .unwrap()
        .json()
        .unwrap();
    assert_eq!(board["care"].as_array().unwrap().len(), 1);
    let r = api
        .req(Method::POST, &format!("{base}/verification/in-context"), Some(&w.bob.token))
        .json(&json!({"moves": [{"node": "w1", "care": false}]}))
        .send()
        .unwrap();
    assert_eq!(r.status(), 200);
    let v: Value = api
        .req(Method::GET, &format!("{base}/annotation"), Some(&w.bob.token))
        .send()
        .unwrap()
        .json()
        .unwrap();
    assert_eq!(v["tree"][0]["care"], json!(false));

    let queue: Value = api
        .req(Method::GET, "/collections/scenes/verification/queue?seed=3", Some(&w.bob.token))
        .send()
        .unwrap()
        .json()
        .unwrap();
    assert!(queue.as_array().unwrap().iter().any(|r| r["node"] == "w1"));
    let r = api
        .req(Method::POST, "/verification/verdicts", Some(&w.organizer.token))
        .json(&json!({"collection": COLLECTION, "image": iid, "node": "w1", "stage": "out_of_context", "verdict": "care"}))
        .send()
        .unwrap();
    assert_eq!(r.status(), 200);
}
