//! Helpers shared by the CLI and acceptance test targets.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

pub const BIN: &str = env!("CARGO_BIN_EXE_nanolens");

pub fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

/// Every file under `dir` except run manifests, which carry paths and
/// wall-clock time.
pub fn read_dir_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in walk(dir) {
        if e.file_name().is_some_and(|n| n != "manifest.json") {
            let rel = e.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
            out.insert(rel, std::fs::read(&e).unwrap());
        }
    }
    out
}

/// Run every artifact-producing command into `root/det_<tag>` and return
/// the files written.
pub fn full_run(root: &Path, tag: &str, threads: &str) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let out = format!("det_{tag}");
    let o = |s: &str| format!("{out}/{s}");
    let cmds: Vec<Vec<String>> = vec![
        vec!["make-corpus", "--per-class", "6", "--size", "16", "--seed", "3", "--out", &o("corpus")],
        vec!["train-cae", "--data", &o("corpus"), "--size", "16", "--channels", "4,2", "--epochs", "2", "--batch-size", "3", "--seed", "9", "--out", &o("cae")],
        vec!["make-surrogate", "--size", "16", "--conv-channels", "4,4", "--hidden", "8", "--epochs", "1", "--per-class", "3", "--seed", "9", "--out", &o("sur")],
        vec!["train-cls", "--data", &o("corpus"), "--regime", "a2", "--base", &o("sur/model.ckpt"), "--size", "16", "--hidden", "8", "--epochs", "2", "--batch-size", "4", "--seed", "9", "--out", &o("cls")],
        vec!["lens", "--ckpt", &o("cae/model.ckpt"), "--image", &o("corpus/dots/dots_0000.png"), "--depth", "1", "--depth", "3", "--out", &o("lens")],
        vec!["filters", "--ckpt", &o("cls/model.ckpt"), "--layer", "2", "--steps", "6", "--seed", "4", "--out", &o("atlas")],
        vec!["filters", "--ckpt", &o("cls/model.ckpt"), "--layer", "0", "--filter", "1", "--steps", "6", "--seed", "4", "--out", &o("single")],
    ]
    .into_iter()
    .map(|c| c.into_iter().map(String::from).collect())
    .collect();
    for c in &cmds {
        let res = Command::new(BIN)
            .args(c)
            .current_dir(root)
            .env("RUST_LOG", "warn")
            .env("RAYON_NUM_THREADS", threads)
            .output()
            .unwrap();
        if !res.status.success() {
            return Err(format!("{c:?} failed: {}", stderr(&res)));
        }
    }
    Ok(read_dir_files(&root.join(out)))
}

pub struct HttpResponse {
    pub status: u16,
    pub content_type: Option<String>,
    pub body: Vec<u8>,
}

impl HttpResponse {
    pub fn json(&self) -> serde_json::Value {
        serde_json::from_slice(&self.body).unwrap_or(serde_json::Value::Null)
    }
}

/// Minimal HTTP/1.1 client: one request per connection.
pub fn http(addr: &str, method: &str, path: &str, content_type: Option<&str>, body: &[u8]) -> HttpResponse {
    let mut s = TcpStream::connect(addr).unwrap();
    let mut head = format!(
        "{method} {path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\nContent-Length: {}\r\n",
        body.len()
    );
    if let Some(ct) = content_type {
        head.push_str(&format!("Content-Type: {ct}\r\n"));
    }
    head.push_str("\r\n");
    s.write_all(head.as_bytes()).unwrap();
    s.write_all(body).unwrap();
    let mut buf = Vec::new();
    s.read_to_end(&mut buf).unwrap();
    let split = buf.windows(4).position(|w| w == b"\r\n\r\n").expect("response head");
    let head = String::from_utf8_lossy(&buf[..split]).into_owned();
    let status = head.split_whitespace().nth(1).unwrap().parse().unwrap();
    let content_type = head.lines().find_map(|l| {
        let (k, v) = l.split_once(':')?;
        k.eq_ignore_ascii_case("content-type").then(|| v.trim().to_string())
    });
    HttpResponse {
        status,
        content_type,
        body: buf[split + 4..].to_vec(),
    }
}

pub fn http_get(addr: &str, path: &str) -> HttpResponse {
    http(addr, "GET", path, None, &[])
}

pub fn http_json(addr: &str, path: &str, body: &serde_json::Value) -> HttpResponse {
    http(addr, "POST", path, Some("application/json"), body.to_string().as_bytes())
}

pub struct Server {
    pub child: Child,
    pub addr: String,
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Start `nanolens serve` on an ephemeral port and wait for its banner.
pub fn start_server(root: &Path, extra: &[&str]) -> Server {
    let mut child = Command::new(BIN)
        .args(["serve", "--port", "0"])
        .args(extra)
        .current_dir(root)
        .env("RUST_LOG", "warn")
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap())
        .read_line(&mut line)
        .unwrap();
    let addr = line
        .trim()
        .strip_prefix("listening on http://")
        .unwrap_or_else(|| panic!("unexpected banner {line:?}"))
        .to_string();
    Server { child, addr }
}
