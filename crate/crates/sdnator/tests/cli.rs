use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

fn sdnator() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_sdnator"));
    // keep the caller's environment from leaking settings in
    for (k, _) in std::env::vars() {
        if k.starts_with("SDNATOR_") {
            c.env_remove(k);
        }
    }
    c
}

fn free_addr() -> SocketAddr {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap()
}

struct Daemon(Child);

impl Drop for Daemon {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn daemon(component: &str, config: &Path) -> Daemon {
    Daemon(
        sdnator()
            .args(["run", component, "--config"])
            .arg(config)
            .stderr(Stdio::null())
            .spawn()
            .unwrap(),
    )
}

fn wait_listening(addr: SocketAddr) {
    let deadline = Instant::now() + Duration::from_secs(10);
    while TcpStream::connect(addr).is_err() {
        assert!(Instant::now() < deadline, "nothing listening on {addr}");
        std::thread::sleep(Duration::from_millis(20));
    }
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn zero_duration_bench_writes_only_the_header() {
    for mode in ["latency", "throughput", "scale"] {
        let o = sdnator().args(["bench", mode, "--duration", "0"]).output().unwrap();
        assert!(o.status.success(), "{mode}: {}", stderr(&o));
        let out = String::from_utf8(o.stdout).unwrap();
        assert_eq!(out.lines().count(), 1, "{mode}: {out}");
        assert!(out.starts_with("mode,pair,msg_size"));
    }
}

#[test]
fn throughput_bench_reports_zero_loss() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("t.csv");
    let o = sdnator()
        .args(["bench", "throughput", "--duration", "0.5", "--warmup", "0.1", "--out"])
        .arg(&csv)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let mut r = csv::Reader::from_path(&csv).unwrap();
    let rows: Vec<csv::StringRecord> = r.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 1);
    let h = r.headers().unwrap().clone();
    let col = |name: &str| h.iter().position(|c| c == name).unwrap();
    assert_eq!(rows[0][col("sent")], rows[0][col("delivered")]);
    assert!(rows[0][col("throughput_msgs_s")].parse::<f64>().unwrap() > 0.0);
}

#[test]
fn occupied_port_is_reported() {
    let taken = TcpListener::bind("127.0.0.1:0").unwrap();
    let o = sdnator()
        .args(["run", "bus"])
        .env("SDNATOR_BUS__LISTEN", taken.local_addr().unwrap().to_string())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("already in use"), "{}", stderr(&o));
}

#[test]
fn bad_config_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    for (text, key) in [
        ("[bus]\nqueue_depth = 4\n", "bus.listen"),
        ("[bus]\nlisten = \"127.0.0.1:0\"\nfrobnicate = 1\n", "bus.frobnicate"),
        ("[bus]\nlisten = \"127.0.0.1:0\"\nqueue_depth = \"deep\"\n", "bus.queue_depth"),
    ] {
        std::fs::write(&path, text).unwrap();
        let o = sdnator().args(["run", "bus", "--config"]).arg(&path).output().unwrap();
        assert_eq!(o.status.code(), Some(2), "{text}");
        assert!(stderr(&o).contains(key), "{text}: {}", stderr(&o));
    }
    let o = sdnator().args(["bench", "latency", "--msg-size", "0"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn services_and_networked_sim_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let (bus, store) = (free_addr(), free_addr());
    let summary = dir.path().join("summary.csv");
    let jobs = dir.path().join("jobs.csv");
    let config = dir.path().join("stack.toml");
    std::fs::write(
        &config,
        format!(
            r#"
[bus]
listen = "{bus}"

[store]
listen = "{store}"
data_dir = "{data}"

[due]
bus_addr = "{bus}"
archive_addr = "{store}"
heartbeat_ms = 200

[sim]
scheduler = "dynamic"
machines = 4
orders = 3
jobs_per_order = 4
seeds = 2
summary_csv = "{summary}"
jobs_csv = "{jobs}"
"#,
            data = dir.path().join("archive").display(),
            summary = summary.display(),
            jobs = jobs.display(),
        ),
    )
    .unwrap();
    let _bus = daemon("bus", &config);
    wait_listening(bus);
    let _store = daemon("store", &config);
    wait_listening(store);
    let _coordinator = daemon("coordinator", &config);
    let o = sdnator().args(["run", "sim", "--config"]).arg(&config).output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let mut r = csv::Reader::from_path(&summary).unwrap();
    let rows: Vec<csv::StringRecord> = r.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|row| &row[0] == "dynamic"));
    let jobs = csv::Reader::from_path(&jobs).unwrap().records().count();
    assert_eq!(jobs, 2 * 3 * 4);
}
