#![allow(dead_code)]

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use seqrec::corpus::{DatasetFormat, DatasetSource};

pub const WORDS: [&str; 24] = [
    "Night", "River", "Ghost", "Summer", "Empire", "Harbor", "Silent", "Crimson", "Garden", "Winter", "Storm",
    "Canyon", "Glass", "Dragon", "Iron", "Velvet", "Desert", "Mirror", "Falcon", "Shadow", "Lantern", "Orchid",
    "Thunder", "Comet",
];

/// Distinct movie-like title for item `i`.
pub fn title(i: usize) -> String {
    let a = WORDS[i % WORDS.len()];
    let b = WORDS[(i / WORDS.len()) % WORDS.len()];
    format!("{a} {b} {}", i / (WORDS.len() * WORDS.len()) + 1)
}

/// Users drawn from a few taste clusters so neighbors are meaningful.
/// Returns `(user, item, timestamp)` rows.
pub fn synthetic_rows(n_users: usize, n_items: usize, seed: u64) -> Vec<(String, usize, i64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clusters = 5;
    let mut rows = Vec::new();
    for u in 0..n_users {
        let cluster = u % clusters;
        let len = rng.gen_range(12..45);
        let mut seen = HashSet::new();
        let mut t = 0;
        while seen.len() < len {
            let item = if rng.gen_bool(0.7) {
                (cluster * n_items / clusters + rng.gen_range(0..n_items / clusters)) % n_items
            } else {
                rng.gen_range(0..n_items)
            };
            if seen.insert(item) {
                t += rng.gen_range(1..100);
                rows.push((format!("u{u:04}"), item, t));
            }
        }
    }
    rows
}

/// Writes a generic TSV dataset and returns its source descriptor.
pub fn write_tsv_dataset(dir: &Path, n_users: usize, n_items: usize, seed: u64) -> DatasetSource {
    let mut items = String::new();
    for i in 0..n_items {
        let _ = writeln!(items, "i{i}\t{}", title(i));
    }
    let mut inter = String::new();
    for (u, i, t) in synthetic_rows(n_users, n_items, seed) {
        let _ = writeln!(inter, "{u}\ti{i}\t{t}");
    }
    std::fs::write(dir.join("items.tsv"), items).unwrap();
    std::fs::write(dir.join("interactions.tsv"), inter).unwrap();
    DatasetSource {
        name: "synthetic".into(),
        format: DatasetFormat::GenericTsv,
        interactions: dir.join("interactions.tsv"),
        items: dir.join("items.tsv"),
    }
}

/// ML-1M-format fixture with short users, rare items and repeated ratings.
/// Returns the source and the raw `(user, item, timestamp)` rows written.
pub fn write_ml1m_fixture(dir: &Path, seed: u64) -> (DatasetSource, Vec<(u32, u32, i64)>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_items = 400u32;
    let mut movies = String::new();
    for i in 1..=n_items {
        let t = title(i as usize);
        let t = if i % 7 == 0 { format!("{t}, The") } else { t };
        let _ = writeln!(movies, "{i}::{t} ({})::Drama|Comedy", 1950 + i % 50);
    }
    let mut rows = Vec::new();
    for u in 1..=300u32 {
        let len = if u % 10 == 0 { rng.gen_range(1..5) } else { rng.gen_range(5..60) };
        for _ in 0..len {
            // Skewed popularity leaves a tail of rarely rated items.
            let item = (rng.gen_range(0.0f64..1.0).powi(3) * n_items as f64) as u32 + 1;
            rows.push((u, item, rng.gen_range(956_703_932i64..1_046_454_590)));
        }
    }
    let mut ratings = String::new();
    for (u, i, t) in &rows {
        let _ = writeln!(ratings, "{u}::{i}::{}::{t}", rng.gen_range(1..=5));
    }
    std::fs::write(dir.join("movies.dat"), movies).unwrap();
    std::fs::write(dir.join("ratings.dat"), ratings).unwrap();
    (
        DatasetSource {
            name: "ml-1m-fixture".into(),
            format: DatasetFormat::Movielens1m,
            interactions: dir.join("ratings.dat"),
            items: dir.join("movies.dat"),
        },
        rows,
    )
}

/// Users, items and interactions after deduplication and iterated
/// `min_count` filtering, computed by repeated full rescans.
pub fn core_stats_oracle(rows: &[(u32, u32, i64)], min_count: usize) -> (usize, usize, usize) {
    let mut pairs: HashSet<(u32, u32)> = rows.iter().map(|(u, i, _)| (*u, *i)).collect();
    loop {
        let mut per_user: HashMap<u32, usize> = HashMap::new();
        let mut per_item: HashMap<u32, usize> = HashMap::new();
        for (u, i) in &pairs {
            *per_user.entry(*u).or_default() += 1;
            *per_item.entry(*i).or_default() += 1;
        }
        let before = pairs.len();
        pairs.retain(|(u, i)| per_user[u] >= min_count && per_item[i] >= min_count);
        if pairs.len() == before {
            let users: HashSet<u32> = pairs.iter().map(|p| p.0).collect();
            let items: HashSet<u32> = pairs.iter().map(|p| p.1).collect();
            return (users.len(), items.len(), pairs.len());
        }
    }
}

pub struct MockServer {
    pub url: String,
    pub hits: Arc<AtomicUsize>,
}

/// Serves `POST` requests on a local port. `respond(n, body)` receives the
/// zero-based request count and parsed JSON body, returning status and body.
pub fn serve<F>(respond: F) -> MockServer
where
    F: Fn(usize, &Value) -> (u16, String) + Send + Sync + 'static,
{
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let respond = Arc::new(respond);
    let counter = Arc::clone(&hits);
    thread::spawn(move || {
        for stream in listener.incoming().flatten() {
            let respond = Arc::clone(&respond);
            let counter = Arc::clone(&counter);
            thread::spawn(move || handle(stream, &*respond, &counter));
        }
    });
    MockServer { url, hits }
}

fn handle<F: Fn(usize, &Value) -> (u16, String)>(stream: TcpStream, respond: &F, counter: &AtomicUsize) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    loop {
        let mut length = 0usize;
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap_or(0) == 0 {
            return;
        }
        loop {
            line.clear();
            if reader.read_line(&mut line).unwrap_or(0) == 0 {
                return;
            }
            let l = line.trim_end();
            if l.is_empty() {
                break;
            }
            if let Some((k, v)) = l.split_once(':') {
                if k.eq_ignore_ascii_case("content-length") {
                    length = v.trim().parse().unwrap_or(0);
                }
            }
        }
        let mut body = vec![0; length];
        if reader.read_exact(&mut body).is_err() {
            return;
        }
        let json: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
        let n = counter.fetch_add(1, Ordering::SeqCst);
        let (status, text) = respond(n, &json);
        let reason = match status {
            200 => "OK",
            429 => "Too Many Requests",
            500 => "Internal Server Error",
            _ => "Status",
        };
        let response = format!(
            "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{text}",
            text.len()
        );
        let mut out = &stream;
        if out.write_all(response.as_bytes()).is_err() {
            return;
        }
    }
}

pub fn chat_reply(content: &str) -> String {
    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string()
}
