//! End-to-end CLI test: real server processes over TCP, driven through
//! the `vblob` binary with a config file.

use std::io::Write;
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

const BIN: &str = env!("CARGO_BIN_EXE_vblob");

struct Proc(Child);

impl Drop for Proc {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn free_port() -> u16 {
    std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port()
}

fn spawn_role(args: &[&str]) -> Proc {
    let child = Command::new(BIN)
        .args(args)
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .expect("spawn server");
    Proc(child)
}

fn wait_listening(addr: &str) {
    let deadline = Instant::now() + Duration::from_secs(10);
    loop {
        if TcpStream::connect(addr).is_ok() {
            return;
        }
        assert!(Instant::now() < deadline, "server at {addr} never came up");
        std::thread::sleep(Duration::from_millis(20));
    }
}

fn run(args: &[&str], stdin: Option<&[u8]>) -> (String, Vec<u8>) {
    let mut cmd = Command::new(BIN);
    cmd.args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped());
    let mut child = cmd.spawn().expect("spawn cli");
    if let Some(data) = stdin {
        child.stdin.as_mut().unwrap().write_all(data).unwrap();
    }
    drop(child.stdin.take());
    let out = child.wait_with_output().expect("cli output");
    assert!(
        out.status.success(),
        "command {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    (
        String::from_utf8_lossy(&out.stdout).trim().to_string(),
        out.stdout,
    )
}

#[test]
fn cli_end_to_end_over_tcp() {
    let vport = free_port();
    let aport = free_port();
    let m1port = free_port();
    let m2port = free_port();
    let p1port = free_port();
    let p2port = free_port();
    let versioner = format!("127.0.0.1:{vport}");
    let allocator = format!("127.0.0.1:{aport}");
    let m1 = format!("127.0.0.1:{m1port}");
    let m2 = format!("127.0.0.1:{m2port}");

    let _v = spawn_role(&["serve", "versioner", "--listen", &versioner]);
    let _a = spawn_role(&["serve", "allocator", "--listen", &allocator]);
    let _m1 = spawn_role(&["serve", "metastore", "--listen", &m1]);
    let _m2 = spawn_role(&["serve", "metastore", "--listen", &m2]);
    wait_listening(&versioner);
    wait_listening(&allocator);
    wait_listening(&m1);
    wait_listening(&m2);
    // providers register with the allocator at startup
    let _p1 = spawn_role(&[
        "serve",
        "provider",
        "--listen",
        &format!("127.0.0.1:{p1port}"),
        "--allocator",
        &allocator,
    ]);
    let _p2 = spawn_role(&[
        "serve",
        "provider",
        "--listen",
        &format!("127.0.0.1:{p2port}"),
        "--allocator",
        &allocator,
    ]);
    wait_listening(&format!("127.0.0.1:{p1port}"));
    wait_listening(&format!("127.0.0.1:{p2port}"));

    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("vblob.conf");
    std::fs::write(
        &config,
        format!(
            "# test deployment\nversioner={versioner}\nallocator={allocator}\nmetastores={m1},{m2}\n"
        ),
    )
    .unwrap();
    let cfg = config.to_str().unwrap();

    let (id, _) = run(&["blob", "create", "--config", cfg, "--psize", "1024"], None);
    assert_eq!(id.len(), 32, "blob id should be 32 hex chars: {id}");

    let data: Vec<u8> = (0..3000u32).map(|i| (i % 251) as u8).collect();
    let (v, _) = run(
        &["blob", "append", "--config", cfg, "--id", &id, "--sync"],
        Some(&data),
    );
    assert_eq!(v, "1");

    let (size, _) = run(
        &["blob", "size", "--config", cfg, "--id", &id, "--version", "1"],
        None,
    );
    assert_eq!(size, "3000");

    let (_, bytes) = run(
        &[
            "blob", "read", "--config", cfg, "--id", &id, "--version", "1",
        ],
        None,
    );
    assert_eq!(bytes, data);

    // overwrite a middle range, then verify both versions
    let patch = vec![0xffu8; 500];
    let (v2, _) = run(
        &[
            "blob", "write", "--config", cfg, "--id", &id, "--offset", "1000", "--sync",
        ],
        Some(&patch),
    );
    assert_eq!(v2, "2");
    let (_, got2) = run(
        &[
            "blob", "read", "--config", cfg, "--id", &id, "--version", "2",
        ],
        None,
    );
    let mut expect2 = data.clone();
    expect2[1000..1500].copy_from_slice(&patch);
    assert_eq!(got2, expect2);
    let (_, got1) = run(
        &[
            "blob", "read", "--config", cfg, "--id", &id, "--version", "1",
        ],
        None,
    );
    assert_eq!(got1, data);

    let (recent, _) = run(&["blob", "recent", "--config", cfg, "--id", &id], None);
    assert_eq!(recent, "2");

    let (bid, _) = run(
        &[
            "blob", "branch", "--config", cfg, "--id", &id, "--version", "1",
        ],
        None,
    );
    assert_ne!(bid, id);
    let (_, branch_read) = run(
        &[
            "blob", "read", "--config", cfg, "--id", &bid, "--version", "1",
        ],
        None,
    );
    assert_eq!(branch_read, data);

    let (published, _) = run(
        &[
            "blob",
            "sync",
            "--config",
            cfg,
            "--id",
            &id,
            "--version",
            "2",
            "--timeout-ms",
            "2000",
        ],
        None,
    );
    assert_eq!(published, "published");
}
