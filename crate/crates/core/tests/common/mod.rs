//! A miniature deployment for integration tests: every role wired up
//! over loopback or TCP, with direct handles kept for introspection.

use std::sync::Arc;

use vblob_core::allocator::Allocator;
use vblob_core::client::{BlobClient, ClientConfig, Endpoints};
use vblob_core::metastore::MetaStore;
use vblob_core::pagestore::{PageStore, PageStoreConfig};
use vblob_core::rpc::{loopback_addr, register_loopback, LoopbackGuard, Rpc, TcpServer};
use vblob_core::versioner::Versioner;

pub struct TestCluster {
    pub rpc: Arc<Rpc>,
    pub eps: Endpoints,
    pub versioner: Arc<Versioner>,
    pub allocator: Arc<Allocator>,
    pub pagestores: Vec<Arc<PageStore>>,
    pub metastores: Vec<Arc<MetaStore>>,
    pub provider_addrs: Vec<String>,
    _guards: Vec<LoopbackGuard>,
    _servers: Vec<TcpServer>,
}

impl TestCluster {
    pub fn in_proc(n_providers: usize, n_meta: usize) -> Self {
        Self::in_proc_with(PageStoreConfig::default(), n_providers, n_meta)
    }

    pub fn in_proc_with(page_cfg: PageStoreConfig, n_providers: usize, n_meta: usize) -> Self {
        let versioner = Arc::new(Versioner::new());
        let allocator = Arc::new(Allocator::new());
        let pagestores: Vec<Arc<PageStore>> = (0..n_providers)
            .map(|_| Arc::new(PageStore::new(page_cfg.clone())))
            .collect();
        let metastores: Vec<Arc<MetaStore>> = (0..n_meta).map(|_| Arc::new(MetaStore::new())).collect();

        let mut guards = Vec::new();
        let versioner_addr = loopback_addr("versioner");
        guards.push(register_loopback(&versioner_addr, versioner.clone()));
        let allocator_addr = loopback_addr("allocator");
        guards.push(register_loopback(&allocator_addr, allocator.clone()));
        let mut provider_addrs = Vec::new();
        for p in &pagestores {
            let addr = loopback_addr("provider");
            guards.push(register_loopback(&addr, p.clone()));
            allocator.register(&addr);
            provider_addrs.push(addr);
        }
        let mut meta_addrs = Vec::new();
        for m in &metastores {
            let addr = loopback_addr("metastore");
            guards.push(register_loopback(&addr, m.clone()));
            meta_addrs.push(addr);
        }

        TestCluster {
            rpc: Arc::new(Rpc::new()),
            eps: Endpoints {
                versioner: versioner_addr,
                allocator: allocator_addr,
                metastores: meta_addrs,
            },
            versioner,
            allocator,
            pagestores,
            metastores,
            provider_addrs,
            _guards: guards,
            _servers: Vec::new(),
        }
    }

    pub fn tcp(n_providers: usize, n_meta: usize) -> Self {
        let versioner = Arc::new(Versioner::new());
        let allocator = Arc::new(Allocator::new());
        let pagestores: Vec<Arc<PageStore>> = (0..n_providers)
            .map(|_| Arc::new(PageStore::in_memory()))
            .collect();
        let metastores: Vec<Arc<MetaStore>> = (0..n_meta).map(|_| Arc::new(MetaStore::new())).collect();

        let mut servers = Vec::new();
        let spawn = |svc: Arc<dyn vblob_core::rpc::Service>| {
            TcpServer::spawn("127.0.0.1:0", svc).expect("spawn tcp server")
        };
        let vs = spawn(versioner.clone());
        let versioner_addr = vs.addr().to_string();
        servers.push(vs);
        let als = spawn(allocator.clone());
        let allocator_addr = als.addr().to_string();
        servers.push(als);
        let mut provider_addrs = Vec::new();
        for p in &pagestores {
            let s = spawn(p.clone());
            allocator.register(s.addr());
            provider_addrs.push(s.addr().to_string());
            servers.push(s);
        }
        let mut meta_addrs = Vec::new();
        for m in &metastores {
            let s = spawn(m.clone());
            meta_addrs.push(s.addr().to_string());
            servers.push(s);
        }

        TestCluster {
            rpc: Arc::new(Rpc::new()),
            eps: Endpoints {
                versioner: versioner_addr,
                allocator: allocator_addr,
                metastores: meta_addrs,
            },
            versioner,
            allocator,
            pagestores,
            metastores,
            provider_addrs,
            _guards: Vec::new(),
            _servers: servers,
        }
    }

    pub fn client(&self) -> BlobClient {
        BlobClient::new(self.rpc.clone(), self.eps.clone())
    }

    pub fn client_with(&self, cfg: ClientConfig) -> BlobClient {
        BlobClient::with_config(self.rpc.clone(), self.eps.clone(), cfg)
    }

    /// Sum of (pages, bytes) across all data providers.
    pub fn page_usage(&self) -> (u64, u64) {
        self.pagestores.iter().fold((0, 0), |(p, b), s| {
            let (sp, sb) = s.usage();
            (p + sp, b + sb)
        })
    }

    /// Total stored tree nodes across all metadata stores.
    pub fn node_count(&self) -> usize {
        self.metastores.iter().map(|m| m.node_count()).sum()
    }
}
