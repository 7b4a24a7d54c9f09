#![allow(dead_code)]

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use morphscope_core::data::{encode_idx, IdxData};

pub fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_morphscope"));
    for var in ["MORPHSCOPE_DATA_DIR", "MORPHSCOPE_CHECKPOINT_DIR", "MORPHSCOPE_SEED", "MORPHSCOPE_DATASET"] {
        cmd.env_remove(var);
    }
    cmd.env("RUST_LOG", "warn");
    cmd
}

pub fn run(args: &[&str], data: &Path, ckpt: &Path) -> Output {
    bin()
        .arg("--data-dir")
        .arg(data)
        .arg("--checkpoint-dir")
        .arg(ckpt)
        .args(args)
        .output()
        .unwrap()
}

/// Class `k` is a bright horizontal bar at row `2k + 4` over faint noise.
pub fn synthetic_split(count: usize, seed: u32) -> (Vec<u8>, Vec<u8>) {
    let mut pixels = Vec::with_capacity(count * 784);
    let mut labels = Vec::with_capacity(count);
    let mut state = seed;
    for i in 0..count {
        let label = (i % 10) as u8;
        labels.push(label);
        for r in 0..28 {
            for _ in 0..28 {
                state = state.wrapping_mul(1_664_525).wrapping_add(1_013_904_223);
                let bar = r == 2 * label as usize + 4 || r == 2 * label as usize + 5;
                pixels.push(if bar { 230 } else { (state >> 27) as u8 });
            }
        }
    }
    let images = encode_idx(&IdxData::Images {
        count,
        rows: 28,
        cols: 28,
        pixels,
    });
    (images, encode_idx(&IdxData::Labels(labels)))
}

/// `<root>/data/mnist` with 300 training and 100 test items.
pub fn synthetic_data(root: &Path) -> PathBuf {
    let data = root.join("data");
    let dir = data.join("mnist");
    std::fs::create_dir_all(&dir).unwrap();
    for (prefix, count, seed) in [("train", 300, 1), ("t10k", 100, 2)] {
        let (images, labels) = synthetic_split(count, seed);
        std::fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), images).unwrap();
        std::fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), labels).unwrap();
    }
    data
}

/// Trains one-epoch checkpoints on the synthetic data through the binary.
pub fn synthetic_checkpoints(data: &Path, ckpt: &Path) {
    let out = run(&["train-vae", "--epochs", "1"], data, ckpt);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = run(&["train-clf", "--epochs", "1"], data, ckpt);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

/// Minimal HTTP/1.1 file server on a background thread; counts requests.
pub struct FileServer {
    pub base: String,
    pub hits: Arc<AtomicUsize>,
}

impl FileServer {
    pub fn start(files: HashMap<String, Vec<u8>>) -> FileServer {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let base = format!("http://{}/", listener.local_addr().unwrap());
        let hits = Arc::new(AtomicUsize::new(0));
        let counter = hits.clone();
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { continue };
                counter.fetch_add(1, Ordering::SeqCst);
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut request_line = String::new();
                if reader.read_line(&mut request_line).is_err() {
                    continue;
                }
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                        break;
                    }
                }
                let path = request_line.split_whitespace().nth(1).unwrap_or("/").trim_start_matches('/');
                let (status, body) = match files.get(path) {
                    Some(b) => ("200 OK", b.clone()),
                    None => ("404 Not Found", Vec::new()),
                };
                let head = format!(
                    "HTTP/1.1 {status}\r\ncontent-length: {}\r\nconnection: close\r\n\r\n",
                    body.len()
                );
                let _ = stream.write_all(head.as_bytes());
                let _ = stream.write_all(&body);
            }
        });
        FileServer { base, hits }
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }
}
