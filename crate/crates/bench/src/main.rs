//! `vblob`: blob operations, service daemons and benchmarks from the
//! command line.

use std::io::{Read, Write};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use vblob_bench::config::Config;
use vblob_bench::{bench_ops, run_random_suite, DeployConfig, Deployment, SuiteConfig, Transport};
use vblob_core::allocator::AllocClient;
use vblob_core::client::{BlobClient, Endpoints};
use vblob_core::pagestore::{PageStore, PageStoreConfig};
use vblob_core::rpc::{Rpc, TcpServer};
use vblob_core::{BlobId, Error};

#[derive(Parser)]
#[command(name = "vblob", about = "Versioned page-striped blob storage", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Blob operations against a running deployment.
    Blob {
        #[command(subcommand)]
        cmd: BlobCmd,
    },
    /// Run one service role.
    Serve {
        #[command(subcommand)]
        cmd: ServeCmd,
    },
    /// Benchmarks and the randomized checker on a self-contained deployment.
    Bench {
        #[command(subcommand)]
        cmd: BenchCmd,
    },
}

/// Endpoint selection: flags override the environment, which overrides
/// the config file.
#[derive(Args, Clone)]
struct EndpointArgs {
    /// Config file with versioner=, allocator=, metastores= lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Version manager address (host:port).
    #[arg(long)]
    endpoint: Option<String>,
    /// Provider manager address.
    #[arg(long)]
    allocator: Option<String>,
    /// Metadata store address; repeat in deployment order.
    #[arg(long = "metastore")]
    metastores: Vec<String>,
}

impl EndpointArgs {
    fn resolve(&self) -> Result<Endpoints, Error> {
        let cfg = match &self.config {
            Some(p) => Config::load(p)?,
            None => match std::env::var("VBLOB_CONFIG") {
                Ok(p) => Config::load(&PathBuf::from(p))?,
                Err(_) => Config::empty(),
            },
        };
        // flags beat config; a full set of flags needs no config at all
        if let (Some(v), Some(a), false) =
            (&self.endpoint, &self.allocator, self.metastores.is_empty())
        {
            return Ok(Endpoints {
                versioner: v.clone(),
                allocator: a.clone(),
                metastores: self.metastores.clone(),
            });
        }
        let mut eps = cfg.endpoints()?;
        if let Some(v) = &self.endpoint {
            eps.versioner = v.clone();
        }
        if let Some(a) = &self.allocator {
            eps.allocator = a.clone();
        }
        if !self.metastores.is_empty() {
            eps.metastores = self.metastores.clone();
        }
        Ok(eps)
    }

    fn client(&self) -> Result<BlobClient, Error> {
        Ok(BlobClient::new(Arc::new(Rpc::new()), self.resolve()?))
    }
}

#[derive(Subcommand)]
enum BlobCmd {
    /// Create a blob; prints its id.
    Create {
        #[command(flatten)]
        eps: EndpointArgs,
        /// Page size in bytes (power of two).
        #[arg(long, default_value_t = 65536)]
        psize: u64,
    },
    /// Write bytes at an offset; prints the assigned version.
    Write {
        #[command(flatten)]
        eps: EndpointArgs,
        #[arg(long)]
        id: String,
        #[arg(long)]
        offset: u64,
        /// Input file; stdin when omitted.
        #[arg(long = "in")]
        input: Option<PathBuf>,
        /// Block until the new version is published.
        #[arg(long)]
        sync: bool,
    },
    /// Append bytes; prints the assigned version.
    Append {
        #[command(flatten)]
        eps: EndpointArgs,
        #[arg(long)]
        id: String,
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[arg(long)]
        sync: bool,
    },
    /// Read a range of a published snapshot.
    Read {
        #[command(flatten)]
        eps: EndpointArgs,
        #[arg(long)]
        id: String,
        #[arg(long)]
        version: u64,
        #[arg(long, default_value_t = 0)]
        offset: u64,
        /// Bytes to read; defaults to the rest of the snapshot.
        #[arg(long)]
        size: Option<u64>,
        /// Output file; stdout when omitted.
        #[arg(long = "out")]
        output: Option<PathBuf>,
    },
    /// Print the size of a published snapshot.
    Size {
        #[command(flatten)]
        eps: EndpointArgs,
        #[arg(long)]
        id: String,
        #[arg(long)]
        version: u64,
    },
    /// Print the most recent published version.
    Recent {
        #[command(flatten)]
        eps: EndpointArgs,
        #[arg(long)]
        id: String,
    },
    /// Block until a version is published.
    Sync {
        #[command(flatten)]
        eps: EndpointArgs,
        #[arg(long)]
        id: String,
        #[arg(long)]
        version: u64,
        /// Give up after this many milliseconds.
        #[arg(long)]
        timeout_ms: Option<u64>,
    },
    /// Fork a new blob at a published version; prints the new id.
    Branch {
        #[command(flatten)]
        eps: EndpointArgs,
        #[arg(long)]
        id: String,
        #[arg(long)]
        version: u64,
    },
}

#[derive(Subcommand)]
enum ServeCmd {
    /// The version manager.
    Versioner {
        #[arg(long)]
        listen: String,
    },
    /// The provider manager.
    Allocator {
        #[arg(long)]
        listen: String,
    },
    /// One metadata store.
    Metastore {
        #[arg(long)]
        listen: String,
    },
    /// One data provider; registers with the provider manager and
    /// reports its load periodically.
    Provider {
        #[arg(long)]
        listen: String,
        /// Provider manager to register with.
        #[arg(long)]
        allocator: String,
        /// Address to advertise (defaults to the bound address).
        #[arg(long)]
        advertise: Option<String>,
        /// Reject puts past this many bytes.
        #[arg(long)]
        capacity: Option<u64>,
        /// Write-through dump directory (one file per page id).
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum BenchCmd {
    /// Single appender against a growing blob; checks metadata node
    /// counts against the naive simulator.
    AppendGrowth {
        #[arg(long, default_value_t = 1024)]
        pages: u64,
        #[arg(long, default_value_t = 65536)]
        psize: u64,
        #[arg(long, default_value_t = 1)]
        chunk_pages: u64,
        #[arg(long, default_value_t = 8)]
        providers: usize,
        #[arg(long, default_value_t = 4)]
        metastores: usize,
        /// Use TCP on 127.0.0.1 instead of the in-process transport.
        #[arg(long)]
        tcp: bool,
        /// Write the plotted series as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Concurrent readers over disjoint chunks of one blob.
    ReadConcurrency {
        #[arg(long, default_value_t = 16)]
        readers: usize,
        /// Chunk per reader, bytes.
        #[arg(long, default_value_t = 4 * 1024 * 1024)]
        chunk: u64,
        #[arg(long, default_value_t = 65536)]
        psize: u64,
        #[arg(long, default_value_t = 8)]
        providers: usize,
        #[arg(long, default_value_t = 4)]
        metastores: usize,
        #[arg(long)]
        tcp: bool,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Seeded random concurrent workload checked against the flat-buffer
    /// oracle; exits nonzero on any divergence.
    RandomSuite {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        ops: usize,
        #[arg(long, default_value_t = 8)]
        writers: usize,
        #[arg(long, default_value_t = 8)]
        readers: usize,
        #[arg(long, default_value_t = 1024)]
        psize: u64,
        #[arg(long, default_value_t = 8)]
        providers: usize,
        #[arg(long, default_value_t = 4)]
        metastores: usize,
        #[arg(long)]
        tcp: bool,
        /// Print the deterministic planned-operation trace.
        #[arg(long)]
        trace: bool,
    },
}

fn read_input(path: &Option<PathBuf>) -> Result<Vec<u8>, Error> {
    match path {
        Some(p) => std::fs::read(p).map_err(|e| Error::Connection(format!("read {p:?}: {e}"))),
        None => {
            let mut buf = Vec::new();
            std::io::stdin()
                .read_to_end(&mut buf)
                .map_err(|e| Error::Connection(format!("stdin: {e}")))?;
            Ok(buf)
        }
    }
}

fn run_blob(cmd: BlobCmd) -> Result<(), Error> {
    match cmd {
        BlobCmd::Create { eps, psize } => {
            let h = eps.client()?.create(psize)?;
            println!("{}", h.id());
        }
        BlobCmd::Write {
            eps,
            id,
            offset,
            input,
            sync,
        } => {
            let h = eps.client()?.open(BlobId::from_hex(&id)?)?;
            let data = read_input(&input)?;
            let v = h.write(offset, &data)?;
            if sync {
                h.sync(v)?;
            }
            println!("{v}");
        }
        BlobCmd::Append {
            eps,
            id,
            input,
            sync,
        } => {
            let h = eps.client()?.open(BlobId::from_hex(&id)?)?;
            let data = read_input(&input)?;
            let v = h.append(&data)?;
            if sync {
                h.sync(v)?;
            }
            println!("{v}");
        }
        BlobCmd::Read {
            eps,
            id,
            version,
            offset,
            size,
            output,
        } => {
            let h = eps.client()?.open(BlobId::from_hex(&id)?)?;
            let size = match size {
                Some(s) => s,
                None => h.size(version)?.saturating_sub(offset),
            };
            let data = h.read(version, offset, size)?;
            match output {
                Some(p) => std::fs::write(&p, &data)
                    .map_err(|e| Error::Connection(format!("write {p:?}: {e}")))?,
                None => std::io::stdout()
                    .write_all(&data)
                    .map_err(|e| Error::Connection(format!("stdout: {e}")))?,
            }
        }
        BlobCmd::Size { eps, id, version } => {
            let h = eps.client()?.open(BlobId::from_hex(&id)?)?;
            println!("{}", h.size(version)?);
        }
        BlobCmd::Recent { eps, id } => {
            let h = eps.client()?.open(BlobId::from_hex(&id)?)?;
            println!("{}", h.recent()?);
        }
        BlobCmd::Sync {
            eps,
            id,
            version,
            timeout_ms,
        } => {
            let h = eps.client()?.open(BlobId::from_hex(&id)?)?;
            match timeout_ms {
                Some(ms) => h.sync_timeout(version, Duration::from_millis(ms))?,
                None => h.sync(version)?,
            }
            println!("published");
        }
        BlobCmd::Branch { eps, id, version } => {
            let h = eps.client()?.open(BlobId::from_hex(&id)?)?;
            println!("{}", h.branch(version)?.id());
        }
    }
    Ok(())
}

fn run_serve(cmd: ServeCmd) -> Result<(), Error> {
    let server = match cmd {
        ServeCmd::Versioner { listen } => {
            TcpServer::spawn(&listen, Arc::new(vblob_core::versioner::Versioner::new()))?
        }
        ServeCmd::Allocator { listen } => {
            TcpServer::spawn(&listen, Arc::new(vblob_core::allocator::Allocator::new()))?
        }
        ServeCmd::Metastore { listen } => {
            TcpServer::spawn(&listen, Arc::new(vblob_core::metastore::MetaStore::new()))?
        }
        ServeCmd::Provider {
            listen,
            allocator,
            advertise,
            capacity,
            data_dir,
        } => {
            let store = Arc::new(PageStore::new(PageStoreConfig {
                capacity_bytes: capacity,
                dump_dir: data_dir,
                delay: None,
            }));
            let server = TcpServer::spawn(&listen, store.clone())?;
            let addr = advertise.unwrap_or_else(|| server.addr().to_string());
            let alloc = AllocClient::new(Arc::new(Rpc::new()), allocator);
            alloc.register(&addr)?;
            // keep the load estimate honest with periodic reports
            std::thread::spawn(move || loop {
                std::thread::sleep(Duration::from_secs(1));
                let (pages, _) = store.usage();
                let _ = alloc.register(&addr);
                let _ = alloc.report(&addr, pages);
            });
            server
        }
    };
    eprintln!("serving on {}", server.addr());
    loop {
        std::thread::sleep(Duration::from_secs(3600));
    }
}

fn deploy_for_bench(providers: usize, metastores: usize, tcp: bool) -> Result<Deployment, Error> {
    Deployment::start(DeployConfig {
        providers,
        metastores,
        transport: if tcp { Transport::Tcp } else { Transport::InProc },
        page_cfg: PageStoreConfig::default(),
    })
}

fn emit(report: &vblob_bench::RunReport, csv: Option<PathBuf>) -> Result<bool, Error> {
    let mut out = std::io::stdout();
    report
        .write_text(&mut out)
        .map_err(|e| Error::Connection(format!("stdout: {e}")))?;
    if let Some(p) = csv {
        let mut f = std::fs::File::create(&p)
            .map_err(|e| Error::Connection(format!("create {p:?}: {e}")))?;
        report
            .write_csv(&mut f)
            .map_err(|e| Error::Connection(format!("write {p:?}: {e}")))?;
    }
    Ok(report.passed())
}

fn run_bench(cmd: BenchCmd) -> Result<bool, Error> {
    match cmd {
        BenchCmd::AppendGrowth {
            pages,
            psize,
            chunk_pages,
            providers,
            metastores,
            tcp,
            csv,
        } => {
            let dep = deploy_for_bench(providers, metastores, tcp)?;
            let report = bench_ops::bench_append_growth(&dep, pages, psize, chunk_pages)?;
            emit(&report, csv)
        }
        BenchCmd::ReadConcurrency {
            readers,
            chunk,
            psize,
            providers,
            metastores,
            tcp,
            csv,
        } => {
            let dep = deploy_for_bench(providers, metastores, tcp)?;
            let report = bench_ops::bench_read_concurrency(&dep, readers, chunk, psize)?;
            emit(&report, csv)
        }
        BenchCmd::RandomSuite {
            seed,
            ops,
            writers,
            readers,
            psize,
            providers,
            metastores,
            tcp,
            trace,
        } => {
            let dep = deploy_for_bench(providers, metastores, tcp)?;
            let cfg = SuiteConfig {
                seed,
                ops,
                writers,
                readers,
                psize,
                ..Default::default()
            };
            let report = run_random_suite(&dep, &cfg);
            if trace {
                report
                    .write_trace(&mut std::io::stdout())
                    .map_err(|e| Error::Connection(format!("stdout: {e}")))?;
            }
            emit(&report, None)
        }
    }
}

fn main() {
    let cli = Cli::parse();
    let outcome = match cli.cmd {
        Cmd::Blob { cmd } => run_blob(cmd).map(|()| true),
        Cmd::Serve { cmd } => run_serve(cmd).map(|()| true),
        Cmd::Bench { cmd } => run_bench(cmd),
    };
    match outcome {
        Ok(true) => {}
        Ok(false) => std::process::exit(1),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(2);
        }
    }
}
