//! Start the annotation service on a random port, open a session over a
//! synthetic dataset, answer the first queue with simulated clicks, train
//! one cycle and print the curve.
//!
//! cargo run --release -p regal-service --example label_session

use std::net::SocketAddr;
use std::time::Duration;

use serde_json::{json, Value};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};

use regal::ingestion::{generate_synthetic, write_dataset, SyntheticConfig};
use regal_service::{router, AppState};

async fn call(addr: SocketAddr, method: &str, path: &str, body: Option<Value>) -> (u16, String) {
    let mut s = TcpStream::connect(addr).await.expect("connect");
    let payload = body.map(|b| b.to_string()).unwrap_or_default();
    let req = format!(
        "{method} {path} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{payload}",
        payload.len()
    );
    s.write_all(req.as_bytes()).await.expect("send");
    let mut raw = String::new();
    s.read_to_string(&mut raw).await.expect("read");
    let (head, body) = raw.split_once("\r\n\r\n").expect("http response");
    (head.split_whitespace().nth(1).and_then(|c| c.parse().ok()).unwrap_or(0), body.to_string())
}

#[tokio::main]
async fn main() {
    let dir = std::env::temp_dir().join("regal-session-demo");
    let _ = std::fs::remove_dir_all(&dir);
    let ds = generate_synthetic(&SyntheticConfig { n_images: 40, seed: 2, ..SyntheticConfig::default() }).unwrap();
    let manifest = write_dataset(&ds, &dir.join("data")).unwrap();

    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let app = router(AppState::open(&dir).unwrap());
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    println!("serving on http://{addr}");

    let cfg = json!({ "regions_per_image": 16, "train": { "max_epochs": 5 } });
    let (_, body) = call(addr, "POST", "/sessions", Some(json!({ "manifest": manifest, "config": cfg }))).await;
    let id = serde_json::from_str::<Value>(&body).unwrap()["id"].as_str().unwrap().to_string();

    // a human would look at crop_png; here the ground truth stands in
    let (_, body) = call(addr, "GET", &format!("/sessions/{id}/queue?k=1000&images=false"), None).await;
    let queue: Value = serde_json::from_str(&body).unwrap();
    let entries = queue["entries"].as_array().unwrap();
    for e in entries {
        let image_id = e["image_id"].as_str().unwrap();
        let rect = &e["rect"];
        let (r0, c0) = (rect["row0"].as_u64().unwrap() as usize, rect["col0"].as_u64().unwrap() as usize);
        let (h, w) = (rect["height"].as_u64().unwrap() as usize, rect["width"].as_u64().unwrap() as usize);
        let gt = ds.get(image_id).unwrap().mask.as_ref().unwrap().classes();
        let hit = (r0..r0 + h).flat_map(|r| (c0..c0 + w).map(move |c| (r, c))).find(|&(r, c)| gt.get(r, c) == 1);
        let label = match hit {
            Some((r, c)) => json!({ "image_id": image_id, "region_index": e["region_index"], "points": [[r, c]] }),
            None => json!({ "image_id": image_id, "region_index": e["region_index"], "background": true }),
        };
        call(addr, "POST", &format!("/sessions/{id}/labels"), Some(label)).await;
    }
    println!("labeled {} seed regions", entries.len());

    call(addr, "POST", &format!("/sessions/{id}/train"), None).await;
    loop {
        let (_, body) = call(addr, "GET", &format!("/sessions/{id}/status"), None).await;
        let status: Value = serde_json::from_str(&body).unwrap();
        if status["job"]["state"] != "training" {
            println!("status: {status}");
            break;
        }
        tokio::time::sleep(Duration::from_millis(200)).await;
    }
    let (_, csv) = call(addr, "GET", &format!("/sessions/{id}/curve"), None).await;
    print!("{csv}");
}
