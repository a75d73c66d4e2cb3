#![allow(dead_code)]

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;

use gsdrag_core::ply::save_ply;
use gsdrag_core::render::cameras_to_json;
use gsdrag_core::synthetic::{fixture_scene, ring_cameras};
use serde_json::Value;

pub struct Fixture {
    pub scene: PathBuf,
    pub cameras: PathBuf,
}

pub fn write_fixture(dir: &Path, n: usize, seed: u64, cameras: usize, size: usize) -> Fixture {
    let scene = dir.join("scene.ply");
    save_ply(&fixture_scene(n, seed), &scene).unwrap();
    let cams = dir.join("cameras.json");
    std::fs::write(&cams, cameras_to_json(&ring_cameras(cameras, 3.0, 1.2, (size, size)))).unwrap();
    Fixture { scene, cameras: cams }
}

/// Writes `extra` merged over scene, cameras, output and fixture drag.
pub fn write_config(dir: &Path, fx: &Fixture, out: &Path, extra: Value) -> PathBuf {
    let mut doc = serde_json::json!({
        "scene_path": fx.scene,
        "cameras_path": fx.cameras,
        "output_dir": out,
        "drag": serde_json::to_value(gsdrag_core::synthetic::fixture_drag(0.5)).unwrap(),
    });
    for (k, v) in extra.as_object().unwrap() {
        doc[k] = v.clone();
    }
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&doc).unwrap()).unwrap();
    path
}

pub fn gsdrag(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gsdrag")).args(args).env("GSDRAG_LOG", "warn").output().unwrap()
}

pub fn run_ok(args: &[&str]) -> Output {
    let out = gsdrag(args);
    assert!(out.status.success(), "gsdrag {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

/// Every file under `root`, keyed by relative path.
pub fn read_tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

/// Loopback corrector that echoes images until `budget` corrections have
/// been served, then answers 500. The budget can be raised later.
pub struct FlakyCorrector {
    pub url: String,
    pub budget: Arc<AtomicUsize>,
    pub served: Arc<AtomicUsize>,
    /// Corrections wait while this is set.
    pub hold: Arc<AtomicBool>,
    pub arrived: Arc<AtomicUsize>,
}

fn read_request(reader: &mut BufReader<TcpStream>) -> Option<(String, Vec<u8>)> {
    let mut line = String::new();
    if reader.read_line(&mut line).ok()? == 0 {
        return None;
    }
    let path = line.split_whitespace().nth(1)?.to_string();
    let mut len = 0;
    loop {
        let mut h = String::new();
        reader.read_line(&mut h).ok()?;
        let h = h.trim_end();
        if h.is_empty() {
            break;
        }
        if let Some((k, v)) = h.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                len = v.trim().parse().ok()?;
            }
        }
    }
    let mut body = vec![0; len];
    reader.read_exact(&mut body).ok()?;
    Some((path, body))
}

fn reply(w: &mut TcpStream, status: &str, ctype: &str, body: &[u8]) {
    let head = format!("HTTP/1.1 {status}\r\nContent-Type: {ctype}\r\nContent-Length: {}\r\n\r\n", body.len());
    let _ = w.write_all(head.as_bytes());
    let _ = w.write_all(body);
}

pub fn flaky_corrector(budget: usize) -> FlakyCorrector {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let budget = Arc::new(AtomicUsize::new(budget));
    let served = Arc::new(AtomicUsize::new(0));
    let hold = Arc::new(AtomicBool::new(false));
    let arrived = Arc::new(AtomicUsize::new(0));
    let (b, s, h, a) = (budget.clone(), served.clone(), hold.clone(), arrived.clone());
    std::thread::spawn(move || {
        for stream in listener.incoming().flatten() {
            let (b, s, h, a) = (b.clone(), s.clone(), h.clone(), a.clone());
            std::thread::spawn(move || {
                let mut w = stream.try_clone().unwrap();
                let mut r = BufReader::new(stream);
                while let Some((path, body)) = read_request(&mut r) {
                    if path == "/correct" {
                        a.fetch_add(1, Ordering::SeqCst);
                        while h.load(Ordering::SeqCst) {
                            std::thread::sleep(std::time::Duration::from_millis(5));
                        }
                    }
                    match path.as_str() {
                        "/correct" if s.load(Ordering::SeqCst) < b.load(Ordering::SeqCst) => {
                            s.fetch_add(1, Ordering::SeqCst);
                            reply(&mut w, "200 OK", "image/png", &body);
                        }
                        "/correct" => reply(&mut w, "500 Internal Server Error", "text/plain", b"out of budget"),
                        "/buffer" => {
                            let _ = w.write_all(b"HTTP/1.1 204 No Content\r\n\r\n");
                        }
                        _ => reply(&mut w, "200 OK", "text/plain", b"ok"),
                    }
                }
            });
        }
    });
    FlakyCorrector { url, budget, served, hold, arrived }
}
