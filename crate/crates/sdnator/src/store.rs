//! The archive store: an append-only record log with time-ordered queries.
//!
//! On disk a store is a directory of segment files, each starting with the
//! `SDAR` magic and a format version, followed by length-prefixed records.
//! Record metadata lives in memory and is rebuilt by scanning the segments
//! on open; a torn record at the tail of the last segment is cut off. Keys
//! with indexing enabled additionally get a sidecar file listing their
//! records in timestamp order.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Read, Seek, SeekFrom, Write};
use std::net::{SocketAddr, TcpStream};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::thread;
use std::time::Duration;

use sdnator_core::archive::{ArchiveQuery, ArchiveRecord};
use sdnator_core::key::DataKey;
use sdnator_core::manifest::InstanceId;
use sdnator_core::wire::{decode_record, encode_record, ErrorCode, Frame, Reader, Writer, DEFAULT_MAX_FRAME, PROTOCOL_VERSION};

use crate::bus::bind;
use crate::error::ServiceError;
use crate::transport::{spawn_writer, FrameReader, OutQueue};

pub const MAGIC: &[u8; 4] = b"SDAR";
pub const FORMAT_VERSION: u16 = 1;
const KIND_SEGMENT: u8 = 1;
const KIND_INDEX: u8 = 2;
const HEADER_LEN: u64 = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FsyncPolicy {
    /// Flush to disk before acknowledging each append batch.
    PerBatch,
    /// Flush in the background every so often; acks do not wait.
    Interval(Duration),
}

impl std::str::FromStr for FsyncPolicy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        if s == "batch" {
            return Ok(FsyncPolicy::PerBatch);
        }
        if let Some(ms) = s.strip_prefix("interval:") {
            let ms: u64 = ms.parse().map_err(|_| format!("bad interval in {s:?}"))?;
            if ms == 0 {
                return Err("interval must be positive".into());
            }
            return Ok(FsyncPolicy::Interval(Duration::from_millis(ms)));
        }
        Err(format!("expected `batch` or `interval:<ms>`, got {s:?}"))
    }
}

#[derive(Debug, Clone)]
pub struct StoreConfig {
    pub listen: String,
    pub data_dir: PathBuf,
    pub segment_bytes: u64,
    pub fsync: FsyncPolicy,
    /// Refuse appends beyond this many bytes of segment data.
    pub max_bytes: Option<u64>,
    pub max_frame: u32,
}

impl Default for StoreConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:7402".into(),
            data_dir: PathBuf::from("sdnator-data"),
            segment_bytes: 64 * 1024 * 1024,
            fsync: FsyncPolicy::PerBatch,
            max_bytes: None,
            max_frame: DEFAULT_MAX_FRAME,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("storage full: {0}")]
    StorageFull(String),
    #[error("malformed query: {0}")]
    MalformedQuery(String),
    #[error("corrupt store file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl StoreError {
    fn code(&self) -> ErrorCode {
        match self {
            StoreError::StorageFull(_) => ErrorCode::STORAGE_FULL,
            StoreError::MalformedQuery(_) => ErrorCode::MALFORMED_QUERY,
            _ => ErrorCode::INTERNAL,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Meta {
    ts: u64,
    key: u32,
    producer: u32,
    seg: u32,
    /// Start of the encoded record, after its length prefix.
    offset: u64,
    len: u32,
}

struct KeyIndex {
    /// Record numbers ordered by (timestamp, record number).
    entries: Vec<u32>,
    file: BufWriter<File>,
}

struct State {
    keys: Vec<DataKey>,
    key_ids: HashMap<String, u32>,
    producers: Vec<String>,
    producer_ids: HashMap<String, u32>,
    metas: Vec<Meta>,
    indexes: HashMap<u32, KeyIndex>,
    segments: Vec<Arc<File>>,
    active: File,
    active_len: u64,
    /// Bytes of the active segment, so recent records are read from memory.
    tail: Vec<u8>,
    total_bytes: u64,
    dirty: bool,
}

pub struct Store {
    dir: PathBuf,
    cfg: StoreConfig,
    state: RwLock<State>,
    stop: Arc<AtomicBool>,
}

fn segment_path(dir: &Path, n: u32) -> PathBuf {
    dir.join(format!("seg-{n:08}.log"))
}

fn index_path(dir: &Path, key: &DataKey) -> PathBuf {
    // FNV-1a over the key text; the key is repeated inside the file.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in key.as_str().bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    dir.join(format!("idx-{h:016x}.idx"))
}

fn header(kind: u8) -> Vec<u8> {
    let mut h = Vec::with_capacity(HEADER_LEN as usize);
    h.extend_from_slice(MAGIC);
    h.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    h.push(kind);
    h
}

fn write_header(f: &mut File, kind: u8) -> io::Result<()> {
    f.write_all(&header(kind))
}

fn check_header(bytes: &[u8], kind: u8, path: &Path) -> Result<(), StoreError> {
    let corrupt = |reason: &str| StoreError::Corrupt {
        path: path.into(),
        reason: reason.into(),
    };
    if bytes.len() < HEADER_LEN as usize || &bytes[..4] != MAGIC {
        return Err(corrupt("missing SDAR header"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(corrupt(&format!("format version {version}, expected {FORMAT_VERSION}")));
    }
    if bytes[6] != kind {
        return Err(corrupt("wrong file kind"));
    }
    Ok(())
}

impl State {
    fn intern_key(&mut self, key: &DataKey) -> u32 {
        if let Some(&id) = self.key_ids.get(key.as_str()) {
            return id;
        }
        let id = self.keys.len() as u32;
        self.keys.push(key.clone());
        self.key_ids.insert(key.as_str().to_string(), id);
        id
    }

    fn intern_producer(&mut self, app: &str) -> u32 {
        if let Some(&id) = self.producer_ids.get(app) {
            return id;
        }
        let id = self.producers.len() as u32;
        self.producers.push(app.to_string());
        self.producer_ids.insert(app.to_string(), id);
        id
    }

    fn index_insert(&mut self, record: u32) {
        let m = self.metas[record as usize];
        let Some(ix) = self.indexes.get_mut(&m.key) else { return };
        let metas = &self.metas;
        let pos = ix.entries.partition_point(|&r| (metas[r as usize].ts, r) < (m.ts, record));
        ix.entries.insert(pos, record);
        let _ = write_index_entry(&mut ix.file, &m);
    }
}

fn write_index_entry(w: &mut impl Write, m: &Meta) -> io::Result<()> {
    let mut e = [0u8; 24];
    e[..8].copy_from_slice(&m.ts.to_le_bytes());
    e[8..12].copy_from_slice(&m.seg.to_le_bytes());
    e[12..20].copy_from_slice(&m.offset.to_le_bytes());
    e[20..24].copy_from_slice(&m.len.to_le_bytes());
    w.write_all(&e)
}

impl Store {
    /// Opens or creates the store in `cfg.data_dir`, rebuilding metadata from
    /// the segments.
    pub fn open(cfg: StoreConfig) -> Result<Arc<Self>, StoreError> {
        let dir = cfg.data_dir.clone();
        fs::create_dir_all(&dir)?;
        let mut seg_numbers: Vec<u32> = Vec::new();
        let mut index_files: Vec<PathBuf> = Vec::new();
        for entry in fs::read_dir(&dir)? {
            let name = entry?.file_name().to_string_lossy().into_owned();
            if let Some(n) = name.strip_prefix("seg-").and_then(|s| s.strip_suffix(".log")) {
                if let Ok(n) = n.parse() {
                    seg_numbers.push(n);
                }
            } else if name.starts_with("idx-") && name.ends_with(".idx") {
                index_files.push(dir.join(name));
            }
        }
        seg_numbers.sort_unstable();
        for (i, n) in seg_numbers.iter().enumerate() {
            if *n != i as u32 {
                return Err(StoreError::Corrupt {
                    path: segment_path(&dir, *n),
                    reason: "segment numbers are not contiguous".into(),
                });
            }
        }

        let mut st = State {
            keys: Vec::new(),
            key_ids: HashMap::new(),
            producers: Vec::new(),
            producer_ids: HashMap::new(),
            metas: Vec::new(),
            indexes: HashMap::new(),
            segments: Vec::new(),
            active: File::open("/dev/null")?,
            active_len: 0,
            tail: Vec::new(),
            total_bytes: 0,
            dirty: false,
        };
        let last = seg_numbers.len().saturating_sub(1);
        for (i, &n) in seg_numbers.iter().enumerate() {
            let path = segment_path(&dir, n);
            let len = scan_segment(&path, n, &mut st, i == last)?;
            st.total_bytes += len;
            st.segments.push(Arc::new(File::open(&path)?));
        }
        if seg_numbers.is_empty() {
            let path = segment_path(&dir, 0);
            let mut f = OpenOptions::new().create(true).truncate(true).write(true).open(&path)?;
            write_header(&mut f, KIND_SEGMENT)?;
            f.sync_all()?;
            st.segments.push(Arc::new(File::open(&path)?));
        }
        let active_no = st.segments.len() as u32 - 1;
        let active_path = segment_path(&dir, active_no);
        st.active = OpenOptions::new().append(true).open(&active_path)?;
        st.tail = fs::read(&active_path)?;
        st.active_len = st.tail.len() as u64;

        let store = Store {
            dir: dir.clone(),
            cfg: cfg.clone(),
            state: RwLock::new(st),
            stop: Arc::new(AtomicBool::new(false)),
        };
        for path in index_files {
            store.load_index(&path)?;
        }
        let store = Arc::new(store);
        if let FsyncPolicy::Interval(every) = cfg.fsync {
            let weak = Arc::downgrade(&store);
            let stop = store.stop.clone();
            thread::Builder::new()
                .name("store-fsync".into())
                .spawn(move || loop {
                    thread::sleep(every);
                    if stop.load(Ordering::Relaxed) {
                        return;
                    }
                    let Some(s) = weak.upgrade() else { return };
                    let _ = s.sync();
                })?;
        }
        Ok(store)
    }

    /// Loads one sidecar, keeping it only if it agrees with the segments;
    /// otherwise it is rewritten from the rebuilt metadata.
    fn load_index(&self, path: &Path) -> Result<(), StoreError> {
        let bytes = fs::read(path)?;
        check_header(&bytes, KIND_INDEX, path)?;
        let mut r = Reader::new(&bytes[HEADER_LEN as usize..]);
        let key = r.key().map_err(|e| StoreError::Corrupt {
            path: path.into(),
            reason: e.to_string(),
        })?;
        let body_start = bytes.len() - r.remaining();
        let stored: Vec<&[u8]> = bytes[body_start..].chunks(24).collect();
        let mut st = self.state.write().unwrap();
        let Some(&kid) = st.key_ids.get(key.as_str()) else {
            // no records yet: keep the index enabled with no entries
            drop(st);
            return self.enable_index(&key, true).map(|_| ());
        };
        let mut entries: Vec<u32> = (0..st.metas.len() as u32).filter(|&i| st.metas[i as usize].key == kid).collect();
        entries.sort_by_key(|&i| (st.metas[i as usize].ts, i));
        let agrees = stored.len() == entries.len()
            && stored.iter().all(|e| e.len() == 24)
            && {
                let mut on_disk: Vec<(u64, u32, u64)> = stored
                    .iter()
                    .map(|e| {
                        (
                            u64::from_le_bytes(e[..8].try_into().unwrap()),
                            u32::from_le_bytes(e[8..12].try_into().unwrap()),
                            u64::from_le_bytes(e[12..20].try_into().unwrap()),
                        )
                    })
                    .collect();
                on_disk.sort_unstable();
                let mut rebuilt: Vec<(u64, u32, u64)> = entries
                    .iter()
                    .map(|&i| {
                        let m = st.metas[i as usize];
                        (m.ts, m.seg, m.offset)
                    })
                    .collect();
                rebuilt.sort_unstable();
                on_disk == rebuilt
            };
        let file = if agrees {
            OpenOptions::new().append(true).open(path)?
        } else {
            rewrite_index(path, &key, entries.iter().map(|&i| st.metas[i as usize]))?
        };
        st.indexes.insert(
            kid,
            KeyIndex {
                entries,
                file: BufWriter::new(file),
            },
        );
        Ok(())
    }

    pub fn config(&self) -> &StoreConfig {
        &self.cfg
    }

    pub fn len(&self) -> usize {
        self.state.read().unwrap().metas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_indexed(&self, key: &DataKey) -> bool {
        let st = self.state.read().unwrap();
        st.key_ids.get(key.as_str()).is_some_and(|id| st.indexes.contains_key(id))
            || index_path(&self.dir, key).exists()
    }

    /// Appends a batch; returns once it is written (and synced under the
    /// per-batch policy).
    pub fn append(&self, records: &[ArchiveRecord]) -> Result<usize, StoreError> {
        if records.is_empty() {
            return Ok(0);
        }
        let mut encoded: Vec<Vec<u8>> = Vec::with_capacity(records.len());
        for r in records {
            let mut buf = Vec::with_capacity(64 + r.value.len());
            let mut w = Writer::new(&mut buf);
            w.u32(0);
            encode_record(&mut w, r);
            let len = (buf.len() - 4) as u32;
            buf[..4].copy_from_slice(&len.to_le_bytes());
            encoded.push(buf);
        }
        let added: u64 = encoded.iter().map(|b| b.len() as u64).sum();

        let mut st = self.state.write().unwrap();
        if let Some(max) = self.cfg.max_bytes {
            if st.total_bytes + added > max {
                return Err(StoreError::StorageFull(format!(
                    "{} + {added} bytes exceeds the {max} byte limit",
                    st.total_bytes
                )));
            }
        }
        let mut pending: Vec<u8> = Vec::new();
        let mut metas: Vec<Meta> = Vec::with_capacity(records.len());
        for (r, buf) in records.iter().zip(&encoded) {
            if st.active_len > HEADER_LEN && st.active_len + buf.len() as u64 > self.cfg.segment_bytes {
                st.active.write_all(&pending).map_err(full_or_io)?;
                pending.clear();
                self.roll(&mut st)?;
            }
            let seg = st.segments.len() as u32 - 1;
            let key = st.intern_key(&r.key);
            let producer = st.intern_producer(&r.producer_app);
            metas.push(Meta {
                ts: r.timestamp_us,
                key,
                producer,
                seg,
                offset: st.active_len + 4,
                len: (buf.len() - 4) as u32,
            });
            st.active_len += buf.len() as u64;
            pending.extend_from_slice(buf);
        }
        st.active.write_all(&pending).map_err(full_or_io)?;
        st.tail.extend_from_slice(&pending);
        match self.cfg.fsync {
            FsyncPolicy::PerBatch => st.active.sync_data()?,
            FsyncPolicy::Interval(_) => st.dirty = true,
        }
        st.total_bytes += added;
        for m in metas {
            st.metas.push(m);
            let n = st.metas.len() as u32 - 1;
            st.index_insert(n);
        }
        for ix in st.indexes.values_mut() {
            ix.file.flush()?;
        }
        Ok(records.len())
    }

    fn roll(&self, st: &mut State) -> Result<(), StoreError> {
        st.active.sync_data()?;
        let n = st.segments.len() as u32;
        let path = segment_path(&self.dir, n);
        let mut f = OpenOptions::new().create(true).truncate(true).write(true).open(&path)?;
        write_header(&mut f, KIND_SEGMENT)?;
        f.sync_all()?;
        st.segments.push(Arc::new(File::open(&path)?));
        st.active = OpenOptions::new().append(true).open(&path)?;
        st.active_len = HEADER_LEN;
        st.tail = header(KIND_SEGMENT);
        if let Ok(d) = File::open(&self.dir) {
            let _ = d.sync_all();
        }
        Ok(())
    }

    pub fn sync(&self) -> io::Result<()> {
        let mut st = self.state.write().unwrap();
        if st.dirty {
            st.active.sync_data()?;
            st.dirty = false;
        }
        Ok(())
    }

    /// Turns the per-key index for `key` on or off. Returns whether it was on.
    pub fn enable_index(&self, key: &DataKey, enabled: bool) -> Result<bool, StoreError> {
        let path = index_path(&self.dir, key);
        let mut st = self.state.write().unwrap();
        let kid = st.intern_key(key);
        let was = st.indexes.contains_key(&kid);
        if enabled && !was {
            let mut entries: Vec<u32> = (0..st.metas.len() as u32).filter(|&i| st.metas[i as usize].key == kid).collect();
            entries.sort_by_key(|&i| (st.metas[i as usize].ts, i));
            let file = rewrite_index(&path, key, entries.iter().map(|&i| st.metas[i as usize]))?;
            st.indexes.insert(
                kid,
                KeyIndex {
                    entries,
                    file: BufWriter::new(file),
                },
            );
        } else if !enabled && was {
            st.indexes.remove(&kid);
            let _ = fs::remove_file(&path);
        }
        Ok(was)
    }

    /// Answers a query against every record appended before the call.
    pub fn query(&self, q: &ArchiveQuery) -> Result<Vec<ArchiveRecord>, StoreError> {
        // Records in sealed segments are read after the lock is released;
        // those in the active segment are copied out of the mirror under it.
        let mut picked: Vec<(Option<Arc<File>>, u64, Meta)> = Vec::new();
        let mut copied: Vec<u8> = Vec::new();
        // Interned names, so stored key text is not parsed again.
        let mut keys: HashMap<u32, DataKey> = HashMap::new();
        let mut producers: HashMap<u32, String> = HashMap::new();
        {
            let st = self.state.read().unwrap();
            let key_ok: Vec<bool> = st
                .keys
                .iter()
                .map(|k| q.pattern.matches(k) && q.pattern.spec_text().is_none_or(|s| k.spec_text() == Some(s)))
                .collect();
            let producer = match &q.producer_app {
                Some(p) => match st.producer_ids.get(p.as_str()) {
                    Some(&id) => Some(id),
                    None => return Ok(Vec::new()),
                },
                None => None,
            };
            let keep = |m: &Meta| {
                key_ok[m.key as usize]
                    && producer.is_none_or(|p| p == m.producer)
                    && q.time_range.is_none_or(|r| r.contains(m.ts))
            };
            let matched_keys: Vec<u32> = (0..key_ok.len() as u32).filter(|&k| key_ok[k as usize]).collect();
            let all_indexed = !matched_keys.is_empty() && matched_keys.iter().all(|k| st.indexes.contains_key(k));
            let mut hits: Vec<u32> = if all_indexed && matched_keys.len() <= 8 {
                let mut out = Vec::new();
                for k in &matched_keys {
                    let entries = &st.indexes[k].entries;
                    let (lo, hi) = match q.time_range {
                        Some(r) => (
                            entries.partition_point(|&i| st.metas[i as usize].ts < r.lo()),
                            entries.partition_point(|&i| st.metas[i as usize].ts < r.hi()),
                        ),
                        None => (0, entries.len()),
                    };
                    out.extend(entries[lo..hi].iter().copied().filter(|&i| keep(&st.metas[i as usize])));
                }
                out
            } else {
                (0..st.metas.len() as u32).filter(|&i| keep(&st.metas[i as usize])).collect()
            };
            hits.sort_by(|&a, &b| {
                q.compare(
                    (st.metas[a as usize].ts, a as u64),
                    (st.metas[b as usize].ts, b as u64),
                )
            });
            if let Some(limit) = q.limit {
                hits.truncate(limit as usize);
            }
            let active = st.segments.len() as u32 - 1;
            picked.reserve(hits.len());
            for &i in &hits {
                let m = st.metas[i as usize];
                keys.entry(m.key).or_insert_with(|| st.keys[m.key as usize].clone());
                producers.entry(m.producer).or_insert_with(|| st.producers[m.producer as usize].clone());
                if m.seg == active {
                    let start = m.offset as usize;
                    picked.push((None, copied.len() as u64, m));
                    copied.extend_from_slice(&st.tail[start..start + m.len as usize]);
                } else {
                    picked.push((Some(st.segments[m.seg as usize].clone()), m.offset, m));
                }
            }
        }
        let mut out = Vec::with_capacity(picked.len());
        let mut buf = Vec::new();
        for (file, offset, m) in picked {
            let len = m.len as usize;
            let bytes = match file {
                Some(file) => {
                    buf.resize(len, 0);
                    file.read_exact_at(&mut buf, offset)?;
                    &buf[..]
                }
                None => &copied[offset as usize..offset as usize + len],
            };
            let corrupt = |e: sdnator_core::wire::WireError| StoreError::Corrupt {
                path: self.dir.clone(),
                reason: e.to_string(),
            };
            let mut r = Reader::new(bytes);
            r.str().map_err(corrupt)?;
            let value = r.bytes().map_err(corrupt)?.to_vec();
            r.u64().map_err(corrupt)?;
            r.str().map_err(corrupt)?;
            let producer_instance = r.instance().map_err(corrupt)?;
            out.push(ArchiveRecord {
                key: keys[&m.key].clone(),
                value,
                timestamp_us: m.ts,
                producer_app: producers[&m.producer].clone(),
                producer_instance,
            });
        }
        Ok(out)
    }

    pub fn shutdown(&self) {
        self.stop.store(true, Ordering::Relaxed);
        let _ = self.sync();
    }
}

impl Drop for Store {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
    }
}

fn full_or_io(e: io::Error) -> StoreError {
    if e.raw_os_error() == Some(28) {
        StoreError::StorageFull(e.to_string())
    } else {
        StoreError::Io(e)
    }
}

fn rewrite_index(path: &Path, key: &DataKey, metas: impl Iterator<Item = Meta>) -> Result<File, StoreError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = OpenOptions::new().create(true).truncate(true).write(true).open(&tmp)?;
        write_header(&mut f, KIND_INDEX)?;
        let mut w = BufWriter::new(f);
        let mut head = Vec::new();
        Writer::new(&mut head).str(key.as_str());
        w.write_all(&head)?;
        for m in metas {
            write_index_entry(&mut w, &m)?;
        }
        w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(OpenOptions::new().append(true).open(path)?)
}

/// Reads every record of one segment into `st`; returns the valid length.
/// A torn record at the end of the last segment is truncated away.
fn scan_segment(path: &Path, seg: u32, st: &mut State, is_last: bool) -> Result<u64, StoreError> {
    let mut f = OpenOptions::new().read(true).write(true).open(path)?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)?;
    if bytes.len() < HEADER_LEN as usize && is_last {
        // crashed while creating the segment
        f.set_len(0)?;
        f.seek(SeekFrom::Start(0))?;
        write_header(&mut f, KIND_SEGMENT)?;
        f.sync_all()?;
        return Ok(HEADER_LEN);
    }
    check_header(&bytes, KIND_SEGMENT, path)?;
    let mut pos = HEADER_LEN as usize;
    while pos < bytes.len() {
        let torn = |pos: usize| -> Result<u64, StoreError> {
            if is_last {
                f.set_len(pos as u64)?;
                f.sync_all()?;
                Ok(pos as u64)
            } else {
                Err(StoreError::Corrupt {
                    path: path.into(),
                    reason: format!("bad record at offset {pos}"),
                })
            }
        };
        if pos + 4 > bytes.len() {
            return torn(pos);
        }
        let len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        if pos + 4 + len > bytes.len() {
            return torn(pos);
        }
        let mut r = Reader::new(&bytes[pos + 4..pos + 4 + len]);
        let rec = match decode_record(&mut r).and_then(|rec| r.finish().map(|_| rec)) {
            Ok(rec) => rec,
            Err(_) => return torn(pos),
        };
        let key = st.intern_key(&rec.key);
        let producer = st.intern_producer(&rec.producer_app);
        st.metas.push(Meta {
            ts: rec.timestamp_us,
            key,
            producer,
            seg,
            offset: (pos + 4) as u64,
            len: len as u32,
        });
        pos += 4 + len;
    }
    Ok(bytes.len() as u64)
}

/// TCP front end for a [`Store`].
pub struct StoreServer {
    addr: SocketAddr,
    store: Arc<Store>,
    stopping: Arc<AtomicBool>,
    conns: Arc<Mutex<Vec<TcpStream>>>,
    accept: Option<thread::JoinHandle<()>>,
}

impl StoreServer {
    pub fn start(cfg: StoreConfig) -> Result<Self, ServiceError> {
        let listener = bind(&cfg.listen)?;
        let store = Store::open(cfg).map_err(|e| ServiceError::Storage(e.to_string()))?;
        Self::serve(listener, store)
    }

    pub fn serve(listener: std::net::TcpListener, store: Arc<Store>) -> Result<Self, ServiceError> {
        let addr = listener.local_addr()?;
        let stopping = Arc::new(AtomicBool::new(false));
        let conns: Arc<Mutex<Vec<TcpStream>>> = Arc::default();
        let (s, stop, cs) = (store.clone(), stopping.clone(), conns.clone());
        let accept = thread::Builder::new().name("store-accept".into()).spawn(move || {
            for stream in listener.incoming() {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let _ = stream.set_nodelay(true);
                if let Ok(c) = stream.try_clone() {
                    cs.lock().unwrap().push(c);
                }
                let s = s.clone();
                let _ = thread::Builder::new()
                    .name("store-conn".into())
                    .spawn(move || serve_conn(stream, s));
            }
        })?;
        Ok(Self {
            addr,
            store,
            stopping,
            conns,
            accept: Some(accept),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    pub fn shutdown(&mut self) {
        if self.stopping.swap(true, Ordering::SeqCst) {
            return;
        }
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.accept.take() {
            let _ = t.join();
        }
        for c in self.conns.lock().unwrap().drain(..) {
            let _ = c.shutdown(std::net::Shutdown::Both);
        }
        self.store.shutdown();
    }
}

impl Drop for StoreServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Record bytes per QUERY_RESULT chunk.
const CHUNK_BYTES: usize = 1 << 20;

fn serve_conn(stream: TcpStream, store: Arc<Store>) {
    let queue = OutQueue::new(1);
    let (Ok(w), Ok(r)) = (stream.try_clone(), stream.try_clone()) else { return };
    let writer = spawn_writer("store-write".into(), queue.clone(), w);
    let mut reader = FrameReader::new(r, store.cfg.max_frame);
    let err = |code: ErrorCode, message: String| Frame::Err { code, message }.to_bytes();
    let mut producer: Option<(String, InstanceId)> = None;
    loop {
        let frame = match reader.read_frame() {
            Ok(Some(f)) => f,
            Ok(None) => break,
            Err(e) => {
                let code = match &e {
                    crate::transport::TransportError::Wire(sdnator_core::wire::WireError::FrameTooLarge { .. }) => {
                        ErrorCode::FRAME_TOO_LARGE
                    }
                    _ => ErrorCode::MALFORMED_FRAME,
                };
                queue.push_control(err(code, e.to_string()));
                break;
            }
        };
        let Some((app, instance)) = &producer else {
            match frame {
                Frame::Hello {
                    version,
                    app_id,
                    instance,
                    ..
                } if version == PROTOCOL_VERSION => {
                    producer = Some((app_id.as_str().to_string(), instance));
                    queue.push_control(
                        Frame::HelloAck {
                            version: PROTOCOL_VERSION,
                            max_frame: store.cfg.max_frame,
                        }
                        .to_bytes(),
                    );
                    continue;
                }
                Frame::Hello { version, .. } => {
                    queue.push_control(err(ErrorCode::VERSION_MISMATCH, format!("protocol {version} unsupported")));
                }
                _ => {
                    queue.push_control(err(ErrorCode::NOT_AUTHENTICATED, "HELLO required first".into()));
                }
            }
            break;
        };
        match frame {
            Frame::ArchiveBatch(entries) => {
                if entries.is_empty() {
                    queue.push_control(err(ErrorCode::EMPTY_BATCH, "empty batch".into()));
                    continue;
                }
                let last_seq = entries.last().map(|e| e.seq).unwrap_or(0);
                let records: Vec<ArchiveRecord> = entries
                    .into_iter()
                    .map(|e| ArchiveRecord {
                        key: e.key,
                        value: e.value,
                        timestamp_us: e.timestamp_us,
                        producer_app: app.clone(),
                        producer_instance: *instance,
                    })
                    .collect();
                match store.append(&records) {
                    Ok(n) => queue.push_control(
                        Frame::Ack {
                            last_seq,
                            count: n as u32,
                        }
                        .to_bytes(),
                    ),
                    Err(e) => queue.push_control(err(e.code(), e.to_string())),
                };
            }
            Frame::Query(q) => match store.query(&q) {
                Ok(records) => {
                    let mut chunk = Vec::new();
                    let mut bytes = 0;
                    let mut iter = records.into_iter().peekable();
                    while let Some(rec) = iter.next() {
                        bytes += sdnator_core::wire::record_len(&rec);
                        chunk.push(rec);
                        if bytes >= CHUNK_BYTES && iter.peek().is_some() {
                            queue.push_control(
                                Frame::QueryResult {
                                    done: false,
                                    records: std::mem::take(&mut chunk),
                                }
                                .to_bytes(),
                            );
                            bytes = 0;
                        }
                    }
                    queue.push_control(Frame::QueryResult { done: true, records: chunk }.to_bytes());
                }
                Err(e) => {
                    queue.push_control(err(e.code(), e.to_string()));
                }
            },
            Frame::SetIndex { key, enabled } => match store.enable_index(&key, enabled) {
                Ok(_) => {
                    queue.push_control(Frame::Ack { last_seq: 0, count: 1 }.to_bytes());
                }
                Err(e) => {
                    queue.push_control(err(e.code(), e.to_string()));
                }
            },
            Frame::Ping(n) => {
                queue.push_control(Frame::Pong(n).to_bytes());
            }
            other => {
                queue.push_control(err(
                    ErrorCode::MALFORMED_FRAME,
                    format!("{:?} not accepted by the store", other.frame_type()),
                ));
            }
        }
    }
    queue.close();
    let _ = writer.join();
}
