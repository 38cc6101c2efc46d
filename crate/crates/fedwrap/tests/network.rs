mod common;

use std::io::{Read, Write};
use std::net::TcpListener;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use fedwrap::core::federation::{FederationPlan, ManualClock};
use fedwrap::core::runtime::client::{ClientError, ClientRole, ClientSession, SessionOutput};
use fedwrap::core::runtime::protocol::{encode, Message, Payload};
use fedwrap::core::sim::{client_configs, initial_global, plan_for, simulate};
use fedwrap::core::wrapper::{wrapper_infer, WrapperMode};
use fedwrap::net::{run_session, Server};
use fedwrap::Error;

#[test]
fn stacking_over_tcp_matches_simulation() {
    for seed in [11, 12] {
        let (partition, locals, cfg) = common::small_setup(seed, WrapperMode::Stacking, 4);
        let sim = simulate(&partition, &locals, &cfg, &ManualClock::new(0)).unwrap();
        let (server, clients) = common::live_run(&partition, &locals, &cfg);
        let outcome = server.unwrap();
        assert_eq!(outcome.log.len(), 4);
        assert!(common::max_abs_diff(&outcome.global, &sim.global) <= 1e-9);
        for c in clients {
            assert!(matches!(c.unwrap(), SessionOutput::Wrapper(_)));
        }
    }
}

#[test]
fn bagging_over_tcp_matches_simulation() {
    let (partition, locals, cfg) = common::small_setup(21, WrapperMode::Bagging, 1);
    let sim = simulate(&partition, &locals, &cfg, &ManualClock::new(0)).unwrap();
    let (server, clients) = common::live_run(&partition, &locals, &cfg);
    server.unwrap();
    for (sim_client, live) in sim.clients.iter().zip(clients) {
        let SessionOutput::Wrapper(state) = live.unwrap() else { panic!("bagging client returned a plain model") };
        for (x, _) in partition.test_set.rows() {
            assert_eq!(
                wrapper_infer(&sim_client.config, &state, x).unwrap(),
                wrapper_infer(&sim_client.config, &sim_client.state, x).unwrap()
            );
        }
    }
}

#[test]
fn duplicate_client_id_is_rejected() {
    let (partition, locals, cfg) = common::small_setup(31, WrapperMode::Stacking, 1);
    let configs = client_configs(&partition, &locals, &cfg).unwrap();
    let translator = configs[0].translator;
    let plan = FederationPlan {
        expected_clients: ["0", "1"].iter().map(|s| s.to_string()).collect(),
        ..plan_for(translator, 2, &cfg)
    };
    let initial = initial_global(translator, cfg.seed).unwrap();
    let server = Server::bind("127.0.0.1:0".parse().unwrap(), Arc::new(AtomicBool::new(false))).unwrap();
    let addr = server.local_addr();
    let server = thread::spawn(move || server.run(&plan, WrapperMode::Stacking, "live-token", initial, &mut |_, _| None));

    let session = |i: usize| {
        let wc = configs[i].clone();
        ClientSession::new(wc.client_id.clone(), "live-token", ClientRole::stacking(wc).unwrap())
    };
    let first = {
        let s = session(0);
        thread::spawn(move || run_session(s, addr, common::timeouts()))
    };
    thread::sleep(Duration::from_millis(300));
    let dup = run_session(session(0), addr, common::timeouts());
    match dup {
        Err(Error::Client(ClientError::Server(m))) => assert!(m.contains("duplicate id"), "{m}"),
        other => panic!("duplicate registration was not rejected: {other:?}"),
    }
    run_session(session(1), addr, common::timeouts()).unwrap();
    first.join().unwrap().unwrap();
    assert_eq!(server.join().unwrap().unwrap().log.len(), 1);
}

#[test]
fn server_dying_mid_round_is_a_transport_error_naming_the_round() {
    let (partition, locals, cfg) = common::small_setup(41, WrapperMode::Stacking, 2);
    let wc = client_configs(&partition, &locals, &cfg).unwrap().remove(0);
    let global = initial_global(wc.translator, cfg.seed).unwrap();
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let fake = thread::spawn(move || {
        let (mut s, _) = listener.accept().unwrap();
        let mut buf = [0u8; 4096];
        let _ = s.read(&mut buf).unwrap();
        let ack = Message::new(0, "server", "live-token", Payload::RegisterAck { roster: vec!["0".into()] });
        let start = Message::new(1, "server", "live-token", Payload::RoundStart { params: global });
        s.write_all(&encode(&ack)).unwrap();
        s.write_all(&encode(&start)).unwrap();
        // Dies without answering the update.
        drop(s);
    });
    let session = ClientSession::new("0", "live-token", ClientRole::stacking(wc).unwrap());
    let err = run_session(session, addr, common::timeouts()).unwrap_err();
    fake.join().unwrap();
    match &err {
        Error::Client(e @ ClientError::Transport { round: 1, .. }) => assert!(e.is_retriable()),
        other => panic!("expected a round-1 transport error, got {other:?}"),
    }
    assert!(err.to_string().contains("round 1"), "{err}");
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn unreachable_server_is_a_connect_error() {
    let addr = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap();
    let (partition, locals, cfg) = common::small_setup(51, WrapperMode::Stacking, 1);
    let wc = client_configs(&partition, &locals, &cfg).unwrap().remove(0);
    let session = ClientSession::new("0", "live-token", ClientRole::stacking(wc).unwrap());
    let err = run_session(session, addr, common::timeouts()).unwrap_err();
    assert!(matches!(err, Error::Connect { .. }), "{err:?}");
    assert!(err.to_string().contains(&addr.to_string()));
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn port_in_use_is_a_bind_error() {
    let taken = TcpListener::bind("127.0.0.1:0").unwrap();
    let err = Server::bind(taken.local_addr().unwrap(), Arc::new(AtomicBool::new(false))).err().unwrap();
    assert!(matches!(err, Error::Bind { .. }), "{err:?}");
    assert_eq!(err.exit_code(), 2);
}
