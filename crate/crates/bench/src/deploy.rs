//! Desk-scale deployment harness: spin up every role in one process,
//! either over the loopback transport or over real TCP sockets on
//! 127.0.0.1, and hand out clients wired to the result.

use std::sync::Arc;

use vblob_core::allocator::Allocator;
use vblob_core::client::{BlobClient, ClientConfig, Endpoints};
use vblob_core::metastore::MetaStore;
use vblob_core::pagestore::{PageStore, PageStoreConfig};
use vblob_core::rpc::{loopback_addr, register_loopback, LoopbackGuard, Rpc, Service, TcpServer};
use vblob_core::versioner::Versioner;
use vblob_core::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transport {
    InProc,
    Tcp,
}

#[derive(Debug, Clone)]
pub struct DeployConfig {
    pub providers: usize,
    pub metastores: usize,
    pub transport: Transport,
    pub page_cfg: PageStoreConfig,
}

impl Default for DeployConfig {
    fn default() -> Self {
        // one data provider co-deployed with one metadata store is the
        // default topology; counts follow the deployment defaults
        Self {
            providers: 8,
            metastores: 4,
            transport: Transport::InProc,
            page_cfg: PageStoreConfig::default(),
        }
    }
}

pub struct Deployment {
    pub rpc: Arc<Rpc>,
    pub endpoints: Endpoints,
    pub versioner: Arc<Versioner>,
    pub allocator: Arc<Allocator>,
    pub pagestores: Vec<Arc<PageStore>>,
    pub metastores: Vec<Arc<MetaStore>>,
    _guards: Vec<LoopbackGuard>,
    _servers: Vec<TcpServer>,
}

impl Deployment {
    pub fn start(cfg: DeployConfig) -> Result<Deployment> {
        let versioner = Arc::new(Versioner::new());
        let allocator = Arc::new(Allocator::new());
        let pagestores: Vec<Arc<PageStore>> = (0..cfg.providers)
            .map(|_| Arc::new(PageStore::new(cfg.page_cfg.clone())))
            .collect();
        let metastores: Vec<Arc<MetaStore>> =
            (0..cfg.metastores).map(|_| Arc::new(MetaStore::new())).collect();

        let mut guards = Vec::new();
        let mut servers = Vec::new();

        let mut bind = |svc: Arc<dyn Service>, name: &str| -> Result<String> {
            match cfg.transport {
                Transport::InProc => {
                    let addr = loopback_addr(name);
                    guards.push(register_loopback(&addr, svc));
                    Ok(addr)
                }
                Transport::Tcp => {
                    let server = TcpServer::spawn("127.0.0.1:0", svc)?;
                    let addr = server.addr().to_string();
                    servers.push(server);
                    Ok(addr)
                }
            }
        };

        let versioner_addr = bind(versioner.clone(), "versioner")?;
        let allocator_addr = bind(allocator.clone(), "allocator")?;
        let mut meta_addrs = Vec::with_capacity(cfg.metastores);
        for m in &metastores {
            meta_addrs.push(bind(m.clone(), "metastore")?);
        }
        for p in &pagestores {
            let addr = bind(p.clone(), "provider")?;
            allocator.register(&addr);
        }

        Ok(Deployment {
            rpc: Arc::new(Rpc::new()),
            endpoints: Endpoints {
                versioner: versioner_addr,
                allocator: allocator_addr,
                metastores: meta_addrs,
            },
            versioner,
            allocator,
            pagestores,
            metastores,
            _guards: guards,
            _servers: servers,
        })
    }

    pub fn in_proc() -> Result<Deployment> {
        Self::start(DeployConfig::default())
    }

    pub fn client(&self) -> BlobClient {
        BlobClient::new(self.rpc.clone(), self.endpoints.clone())
    }

    pub fn client_with(&self, cfg: ClientConfig) -> BlobClient {
        BlobClient::with_config(self.rpc.clone(), self.endpoints.clone(), cfg)
    }

    /// Total (pages, bytes) across all data providers.
    pub fn page_usage(&self) -> (u64, u64) {
        self.pagestores.iter().fold((0, 0), |(p, b), s| {
            let (sp, sb) = s.usage();
            (p + sp, b + sb)
        })
    }

    pub fn per_provider_pages(&self) -> Vec<u64> {
        self.pagestores.iter().map(|s| s.usage().0).collect()
    }

    pub fn node_count(&self) -> usize {
        self.metastores.iter().map(|m| m.node_count()).sum()
    }

    /// All stored node keys across the metadata stores.
    pub fn node_keys(&self) -> Vec<vblob_core::metastore::NodeKey> {
        self.metastores.iter().flat_map(|m| m.keys()).collect()
    }
}
