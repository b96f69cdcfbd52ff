//! Footage object store.
//!
//! Objects are immutable files named `<16 hex id>.<ext>` under a root
//! directory. [`StoreServer`] exposes them as `GET /<hex>.<ext>`; `PUT` on
//! the same path is accepted only from loopback peers. The server logs
//! method, path, status and length, never payload bytes.

use std::fs;
use std::io::{ErrorKind, Read, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, SystemTime};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::VideoId;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StoreError {
    #[error("object {0} already exists")]
    Conflict(String),
    #[error("object {0} not found")]
    NotFound(String),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("forbidden: {0}")]
    Forbidden(String),
    #[error("store unreachable: {0}")]
    Unreachable(String),
    #[error("store i/o: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, StoreError>;

fn io_err(e: std::io::Error) -> StoreError {
    StoreError::Io(e.to_string())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Extension {
    Mp4,
    Jpg,
}

impl Extension {
    pub fn as_str(self) -> &'static str {
        match self {
            Extension::Mp4 => "mp4",
            Extension::Jpg => "jpg",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mp4" => Some(Extension::Mp4),
            "jpg" => Some(Extension::Jpg),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ObjectKey {
    pub video_id: VideoId,
    pub extension: Extension,
}

impl ObjectKey {
    pub fn new(video_id: VideoId, extension: Extension) -> Self {
        Self {
            video_id,
            extension,
        }
    }

    pub fn file_name(&self) -> String {
        format!("{}.{}", self.video_id.to_hex(), self.extension.as_str())
    }

    /// Parses `<16 hex>.<mp4|jpg>`, with or without a leading slash.
    pub fn parse(name: &str) -> Result<Self> {
        let name = name.strip_prefix('/').unwrap_or(name);
        let (id, ext) = name
            .rsplit_once('.')
            .ok_or_else(|| StoreError::BadRequest(format!("{name:?} has no extension")))?;
        let extension = Extension::parse(ext)
            .ok_or_else(|| StoreError::BadRequest(format!("unsupported extension {ext:?}")))?;
        if id.len() != 16 || !id.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(StoreError::BadRequest(format!(
                "{id:?} is not a 16-character hex id"
            )));
        }
        let video_id = VideoId::from_hex(&id.to_ascii_lowercase())
            .map_err(|e| StoreError::BadRequest(e.to_string()))?;
        Ok(Self::new(video_id, extension))
    }

    /// Key for the last path component of a footage URL.
    pub fn from_url(url: &str) -> Result<Self> {
        let path = url.split(['?', '#']).next().unwrap_or(url);
        let last = path.rsplit('/').next().unwrap_or(path);
        Self::parse(last)
    }
}

impl std::fmt::Display for ObjectKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.file_name())
    }
}

/// Write side of a store, as seen by a camera.
pub trait ObjectStore {
    fn put(&self, key: &ObjectKey, bytes: &[u8]) -> Result<()>;
    fn exists(&self, key: &ObjectKey) -> Result<bool>;
}

impl<T: ObjectStore + ?Sized> ObjectStore for Arc<T> {
    fn put(&self, key: &ObjectKey, bytes: &[u8]) -> Result<()> {
        (**self).put(key, bytes)
    }
    fn exists(&self, key: &ObjectKey) -> Result<bool> {
        (**self).exists(key)
    }
}

impl<T: ObjectStore + ?Sized> ObjectStore for Box<T> {
    fn put(&self, key: &ObjectKey, bytes: &[u8]) -> Result<()> {
        (**self).put(key, bytes)
    }
    fn exists(&self, key: &ObjectKey) -> Result<bool> {
        (**self).exists(key)
    }
}

/// Read side, as seen by a client holding a footage URL.
pub trait Fetcher {
    fn fetch(&self, url: &str) -> Result<Vec<u8>>;
}

/// Filesystem-backed store.
#[derive(Clone, Debug)]
pub struct FsStore {
    root: PathBuf,
}

impl FsStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(io_err)?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_of(&self, key: &ObjectKey) -> PathBuf {
        self.root.join(key.file_name())
    }

    pub fn get(&self, key: &ObjectKey) -> Result<Vec<u8>> {
        match fs::read(self.path_of(key)) {
            Ok(b) => Ok(b),
            Err(e) if e.kind() == ErrorKind::NotFound => Err(StoreError::NotFound(key.file_name())),
            Err(e) => Err(io_err(e)),
        }
    }

    /// Every object currently stored, sorted by file name.
    pub fn list(&self) -> Result<Vec<ObjectKey>> {
        let mut keys: Vec<ObjectKey> = fs::read_dir(&self.root)
            .map_err(io_err)?
            .filter_map(|e| e.ok())
            .filter_map(|e| ObjectKey::parse(&e.file_name().to_string_lossy()).ok())
            .collect();
        keys.sort_by_key(|k| k.file_name());
        Ok(keys)
    }

    /// Removes objects whose modification time is older than `max_age`.
    pub fn sweep_older_than(&self, max_age: Duration) -> Result<Vec<ObjectKey>> {
        let now = SystemTime::now();
        let mut removed = Vec::new();
        for key in self.list()? {
            let path = self.path_of(&key);
            let modified = fs::metadata(&path).and_then(|m| m.modified()).map_err(io_err)?;
            if now.duration_since(modified).unwrap_or_default() > max_age {
                fs::remove_file(&path).map_err(io_err)?;
                removed.push(key);
            }
        }
        Ok(removed)
    }
}

impl ObjectStore for FsStore {
    fn put(&self, key: &ObjectKey, bytes: &[u8]) -> Result<()> {
        let dest = self.path_of(key);
        if dest.exists() {
            return Err(StoreError::Conflict(key.file_name()));
        }
        let tmp = self.root.join(format!(
            ".incoming-{}-{}",
            key.file_name(),
            crate::crypto::generate_token()
                .map(hex::encode)
                .map_err(|e| StoreError::Io(e.to_string()))?
        ));
        let result = (|| {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(bytes)?;
            f.sync_all()?;
            // hard_link refuses to replace an existing file, which makes the
            // final publish step atomic with respect to concurrent writers.
            fs::hard_link(&tmp, &dest)
        })();
        let _ = fs::remove_file(&tmp);
        match result {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == ErrorKind::AlreadyExists => {
                Err(StoreError::Conflict(key.file_name()))
            }
            Err(e) => Err(io_err(e)),
        }
    }

    fn exists(&self, key: &ObjectKey) -> Result<bool> {
        Ok(self.path_of(key).exists())
    }
}

impl Fetcher for FsStore {
    fn fetch(&self, url: &str) -> Result<Vec<u8>> {
        self.get(&ObjectKey::from_url(url)?)
    }
}

/// One served request. Payloads are represented by their length only.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestLogEntry {
    pub method: String,
    pub path: String,
    pub status: u16,
    pub bytes: usize,
    pub peer: Option<String>,
}

#[derive(Clone, Debug)]
pub struct ServeOptions {
    /// Accept PUT from loopback peers.
    pub allow_put: bool,
    pub workers: usize,
}

impl Default for ServeOptions {
    fn default() -> Self {
        Self {
            allow_put: true,
            workers: 4,
        }
    }
}

/// HTTP front end for an [`FsStore`]. Stops when dropped.
pub struct StoreServer {
    addr: SocketAddr,
    server: Arc<tiny_http::Server>,
    log: Arc<Mutex<Vec<RequestLogEntry>>>,
    stop: Arc<AtomicBool>,
    workers: Vec<JoinHandle<()>>,
}

impl StoreServer {
    pub fn start(store: FsStore, bind: &str, options: ServeOptions) -> Result<Self> {
        let server = tiny_http::Server::http(bind)
            .map(Arc::new)
            .map_err(|e| StoreError::Io(format!("bind {bind}: {e}")))?;
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| StoreError::Io("server is not bound to an IP socket".into()))?;
        let log = Arc::new(Mutex::new(Vec::new()));
        let stop = Arc::new(AtomicBool::new(false));
        let workers = (0..options.workers.max(1))
            .map(|_| {
                let server = server.clone();
                let store = store.clone();
                let log = log.clone();
                let stop = stop.clone();
                let allow_put = options.allow_put;
                std::thread::spawn(move || {
                    while !stop.load(Ordering::Relaxed) {
                        match server.recv_timeout(Duration::from_millis(100)) {
                            Ok(Some(req)) => {
                                let entry = handle(&store, req, allow_put);
                                log.lock().unwrap_or_else(|e| e.into_inner()).push(entry);
                            }
                            Ok(None) => {}
                            Err(_) => break,
                        }
                    }
                })
            })
            .collect();
        Ok(Self {
            addr,
            server,
            log,
            stop,
            workers,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn request_log(&self) -> Vec<RequestLogEntry> {
        self.log.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    /// Blocks until `stop` is set, then shuts the server down.
    pub fn run_until(self, stop: &AtomicBool) {
        while !stop.load(Ordering::Relaxed) {
            std::thread::sleep(Duration::from_millis(50));
        }
    }
}

impl Drop for StoreServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        self.server.unblock();
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

fn respond(req: tiny_http::Request, status: u16, body: Vec<u8>) {
    let _ = req.respond(tiny_http::Response::from_data(body).with_status_code(status));
}

fn handle(store: &FsStore, mut req: tiny_http::Request, allow_put: bool) -> RequestLogEntry {
    let method = req.method().to_string();
    let path = req.url().to_string();
    let peer = req.remote_addr().copied();
    let mut entry = RequestLogEntry {
        method: method.clone(),
        path: path.clone(),
        status: 500,
        bytes: 0,
        peer: peer.map(|p| p.to_string()),
    };
    let key = match ObjectKey::parse(&path) {
        Ok(k) => k,
        Err(_) => {
            entry.status = 400;
            respond(req, 400, b"bad request\n".to_vec());
            return entry;
        }
    };
    match req.method() {
        tiny_http::Method::Get => match store.get(&key) {
            Ok(bytes) => {
                entry.status = 200;
                entry.bytes = bytes.len();
                respond(req, 200, bytes);
            }
            Err(StoreError::NotFound(_)) => {
                entry.status = 404;
                respond(req, 404, b"not found\n".to_vec());
            }
            Err(_) => {
                entry.status = 500;
                respond(req, 500, Vec::new());
            }
        },
        tiny_http::Method::Head => {
            entry.status = if store.path_of(&key).exists() { 200 } else { 404 };
            respond(req, entry.status, Vec::new());
        }
        tiny_http::Method::Put => {
            let loopback = peer.is_some_and(|p| p.ip().is_loopback());
            if !allow_put || !loopback {
                entry.status = 403;
                respond(req, 403, b"uploads are restricted to the operator\n".to_vec());
                return entry;
            }
            let mut body = Vec::new();
            if req.as_reader().read_to_end(&mut body).is_err() {
                entry.status = 400;
                respond(req, 400, Vec::new());
                return entry;
            }
            entry.bytes = body.len();
            entry.status = match store.put(&key, &body) {
                Ok(()) => 201,
                Err(StoreError::Conflict(_)) => 409,
                Err(_) => 500,
            };
            respond(req, entry.status, Vec::new());
        }
        _ => {
            entry.status = 405;
            respond(req, 405, Vec::new());
        }
    }
    entry
}

fn agent() -> ureq::Agent {
    ureq::AgentBuilder::new()
        .timeout_connect(Duration::from_secs(2))
        .timeout(Duration::from_secs(10))
        .build()
}

fn map_ureq(err: ureq::Error, what: &str) -> StoreError {
    match err {
        ureq::Error::Status(404, _) => StoreError::NotFound(what.to_string()),
        ureq::Error::Status(409, _) => StoreError::Conflict(what.to_string()),
        ureq::Error::Status(400, _) => StoreError::BadRequest(what.to_string()),
        ureq::Error::Status(403, _) => StoreError::Forbidden(what.to_string()),
        ureq::Error::Status(code, _) => StoreError::Io(format!("{what}: HTTP {code}")),
        ureq::Error::Transport(t) => StoreError::Unreachable(format!("{what}: {t}")),
    }
}

/// Camera-side client for a remote [`StoreServer`].
#[derive(Clone, Debug)]
pub struct HttpStore {
    base: String,
    agent: ureq::Agent,
}

impl HttpStore {
    pub fn new(base_url: &str) -> Self {
        Self {
            base: base_url.trim_end_matches('/').to_string(),
            agent: agent(),
        }
    }

    fn url(&self, key: &ObjectKey) -> String {
        format!("{}/{}", self.base, key.file_name())
    }
}

impl ObjectStore for HttpStore {
    fn put(&self, key: &ObjectKey, bytes: &[u8]) -> Result<()> {
        self.agent
            .put(&self.url(key))
            .send_bytes(bytes)
            .map(|_| ())
            .map_err(|e| map_ureq(e, &key.file_name()))
    }

    fn exists(&self, key: &ObjectKey) -> Result<bool> {
        match self.agent.head(&self.url(key)).call() {
            Ok(_) => Ok(true),
            Err(ureq::Error::Status(404, _)) => Ok(false),
            Err(e) => Err(map_ureq(e, &key.file_name())),
        }
    }
}

/// Plain HTTP GET of footage URLs. Sends nothing but the URL.
#[derive(Clone, Debug)]
pub struct HttpFetcher {
    agent: ureq::Agent,
}

impl Default for HttpFetcher {
    fn default() -> Self {
        Self { agent: agent() }
    }
}

impl Fetcher for HttpFetcher {
    fn fetch(&self, url: &str) -> Result<Vec<u8>> {
        let resp = self.agent.get(url).call().map_err(|e| map_ureq(e, url))?;
        let mut body = Vec::new();
        resp.into_reader()
            .read_to_end(&mut body)
            .map_err(|e| StoreError::Unreachable(format!("{url}: {e}")))?;
        Ok(body)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(b: u8) -> ObjectKey {
        ObjectKey::new(VideoId([b; 8]), Extension::Mp4)
    }

    #[test]
    fn object_key_parsing() {
        let k = ObjectKey::parse("/0102030405060708.mp4").unwrap();
        assert_eq!(k.video_id, VideoId([1, 2, 3, 4, 5, 6, 7, 8]));
        assert_eq!(k.file_name(), "0102030405060708.mp4");
        assert!(matches!(ObjectKey::parse("/zz.mp4"), Err(StoreError::BadRequest(_))));
        assert!(matches!(ObjectKey::parse("/0102030405060708.avi"), Err(StoreError::BadRequest(_))));
        assert!(matches!(ObjectKey::parse("/0102030405060708"), Err(StoreError::BadRequest(_))));
        assert_eq!(
            ObjectKey::from_url("https://files.example/a/b/0102030405060708.jpg").unwrap(),
            ObjectKey::new(VideoId([1, 2, 3, 4, 5, 6, 7, 8]), Extension::Jpg)
        );
    }

    #[test]
    fn put_get_and_immutability() {
        let dir = tempfile::tempdir().unwrap();
        let store = FsStore::open(dir.path()).unwrap();
        let k = ObjectKey::new(VideoId([1, 2, 3, 4, 5, 6, 7, 8]), Extension::Mp4);
        store.put(&k, b"ciphertext").unwrap();
        assert_eq!(store.get(&k).unwrap(), b"ciphertext");
        assert!(dir.path().join("0102030405060708.mp4").is_file());
        assert_eq!(store.put(&k, b"other"), Err(StoreError::Conflict(k.file_name())));
        assert_eq!(store.get(&k).unwrap(), b"ciphertext");
        assert!(matches!(store.get(&key(9)), Err(StoreError::NotFound(_))));
        assert_eq!(store.list().unwrap(), vec![k]);
    }

    #[test]
    fn sweep_removes_old_objects() {
        let dir = tempfile::tempdir().unwrap();
        let store = FsStore::open(dir.path()).unwrap();
        store.put(&key(1), b"a").unwrap();
        assert!(store.sweep_older_than(Duration::from_secs(3600)).unwrap().is_empty());
        std::thread::sleep(Duration::from_millis(20));
        assert_eq!(store.sweep_older_than(Duration::from_millis(1)).unwrap(), vec![key(1)]);
        assert!(store.list().unwrap().is_empty());
    }

    #[test]
    fn http_get_put_statuses() {
        let dir = tempfile::tempdir().unwrap();
        let store = FsStore::open(dir.path()).unwrap();
        let server = StoreServer::start(store.clone(), "127.0.0.1:0", ServeOptions::default()).unwrap();
        let remote = HttpStore::new(&server.base_url());
        let fetcher = HttpFetcher::default();

        assert!(!remote.exists(&key(1)).unwrap());
        remote.put(&key(1), b"sealed bytes").unwrap();
        assert!(remote.exists(&key(1)).unwrap());
        assert!(matches!(remote.put(&key(1), b"again"), Err(StoreError::Conflict(_))));

        let url = format!("{}/{}", server.base_url(), key(1).file_name());
        assert_eq!(fetcher.fetch(&url).unwrap(), b"sealed bytes");
        let missing = format!("{}/{}", server.base_url(), key(2).file_name());
        assert!(matches!(fetcher.fetch(&missing), Err(StoreError::NotFound(_))));
        let bad = format!("{}/zz.mp4", server.base_url());
        assert!(matches!(fetcher.fetch(&bad), Err(StoreError::BadRequest(_))));

        let log = server.request_log();
        let statuses: Vec<u16> = log.iter().map(|e| e.status).collect();
        assert_eq!(statuses, vec![404, 201, 200, 409, 200, 404, 400]);
        assert!(log.iter().all(|e| !e.path.contains("sealed")));
    }

    #[test]
    fn read_only_server_refuses_put() {
        let dir = tempfile::tempdir().unwrap();
        let store = FsStore::open(dir.path()).unwrap();
        let server = StoreServer::start(
            store,
            "127.0.0.1:0",
            ServeOptions { allow_put: false, workers: 1 },
        )
        .unwrap();
        let remote = HttpStore::new(&server.base_url());
        assert!(matches!(remote.put(&key(3), b"x"), Err(StoreError::Forbidden(_))));
    }

    #[test]
    fn unreachable_store() {
        let remote = HttpStore::new("http://127.0.0.1:9");
        assert!(matches!(remote.put(&key(1), b"x"), Err(StoreError::Unreachable(_))));
    }
}
