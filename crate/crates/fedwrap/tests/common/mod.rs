#![allow(dead_code)]

use std::net::SocketAddr;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use fedwrap::core::dataset::{build_partition, Dataset, Partition, PartitionMode, PartitionSpec};
use fedwrap::core::federation::FederationOutcome;
use fedwrap::core::model::TrainHp;
use fedwrap::core::runtime::client::{ClientRole, ClientSession, SessionOutput};
use fedwrap::core::sim::{client_configs, initial_global, plan_for, train_locals, Arch, SimConfig};
use fedwrap::core::wrapper::{LocalModelHandle, WrapperMode};
use fedwrap::net::{run_session, ClientTimeouts, Server};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn blobs(n: usize, in_dim: usize, gap: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut features = Vec::with_capacity(n * in_dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % 2;
        for _ in 0..in_dim {
            features.push(noise.sample(&mut rng) + gap * y as f64);
        }
        labels.push(y);
    }
    Dataset::new(features, in_dim, labels, 2).unwrap()
}

/// Three non-IID clients with LR / MLP-4 / LR local models.
pub fn small_setup(seed: u64, mode: WrapperMode, rounds: u32) -> (Partition, Vec<LocalModelHandle>, SimConfig) {
    let data = blobs(600, 4, 1.2, seed);
    let spec = PartitionSpec { n_clients: 3, alpha: 1.0, mode: PartitionMode::NonIid, seed, test_fraction: 0.2 };
    let partition = build_partition(&data, &spec).unwrap();
    let hp = TrainHp { local_epochs: 3, ..TrainHp::default() };
    let locals = train_locals(&partition, &[Arch::Lr, Arch::Mlp(4), Arch::Lr], &hp, seed)
        .unwrap()
        .into_iter()
        .map(LocalModelHandle::from)
        .collect();
    let cfg = SimConfig {
        mode,
        rounds,
        translator_hidden: Some(5),
        hp: TrainHp { local_epochs: 2, ..TrainHp::default() },
        seed,
        token: "live-token".into(),
        timeout_ms: 20_000,
        ..SimConfig::default()
    };
    (partition, locals, cfg)
}

pub fn timeouts() -> ClientTimeouts {
    ClientTimeouts { connect: Duration::from_secs(5), idle: Duration::from_secs(30) }
}

pub type LiveResult = (fedwrap::Result<FederationOutcome>, Vec<fedwrap::Result<SessionOutput>>);

/// Same federation as `simulate`, over loopback TCP with one thread per
/// client.
pub fn live_run(partition: &Partition, locals: &[LocalModelHandle], cfg: &SimConfig) -> LiveResult {
    let configs = client_configs(partition, locals, cfg).unwrap();
    let translator = configs[0].translator;
    let plan = plan_for(translator, configs.len(), cfg);
    let initial = match cfg.mode {
        WrapperMode::Stacking => initial_global(translator, cfg.seed).unwrap(),
        WrapperMode::Bagging => Vec::new(),
    };
    let server = Server::bind("127.0.0.1:0".parse().unwrap(), Arc::new(AtomicBool::new(false))).unwrap();
    let addr: SocketAddr = server.local_addr();
    let (mode, token) = (cfg.mode, cfg.token.clone());
    let server_thread = thread::spawn(move || server.run(&plan, mode, &token, initial, &mut |_, _| None));
    let clients: Vec<_> = configs
        .into_iter()
        .map(|wc| {
            let token = cfg.token.clone();
            thread::spawn(move || {
                let role = match mode {
                    WrapperMode::Stacking => ClientRole::stacking(wc.clone()).unwrap(),
                    WrapperMode::Bagging => ClientRole::bagging(wc.clone()).unwrap(),
                };
                run_session(ClientSession::new(wc.client_id.clone(), token, role), addr, timeouts())
            })
        })
        .collect();
    let outputs = clients.into_iter().map(|h| h.join().unwrap()).collect();
    (server_thread.join().unwrap(), outputs)
}

pub fn max_abs_diff(a: &[fedwrap::core::model::ParamBlock], b: &[fedwrap::core::model::ParamBlock]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.shape, y.shape);
            x.values.iter().zip(&y.values).map(|(u, v)| (u - v).abs())
        })
        .fold(0.0, f64::max)
}
