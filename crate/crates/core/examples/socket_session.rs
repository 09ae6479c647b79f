//! A cloud server and three devices talking over loopback TCP.

use std::net::TcpListener;
use std::path::Path;
use std::thread;

use tandem::bench::Prepared;
use tandem::choice::stream_rng;
use tandem::clock::SimClock;
use tandem::cloud::{serve, CloudRuntime, ServeOptions};
use tandem::device::{run_session, DeviceSession};
use tandem::transport::TcpCarrier;
use tandem::types::SessionId;

fn main() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios/single_session.toml");
    let p = Prepared::load(&path).unwrap();
    let s = &p.scenario;

    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let runtime = CloudRuntime::new(p.target.clone(), s.cloud.clone(), stream_rng(s.seed, 0xc10d)).unwrap();
    let server = thread::spawn(move || {
        let options = ServeOptions {
            max_connections: Some(3),
            ..Default::default()
        };
        serve(listener, runtime, options).unwrap()
    });

    let devices: Vec<_> = (0..3u64)
        .map(|i| {
            let mut device = DeviceSession::seeded(
                SessionId(i),
                p.prompt(i as usize),
                s.session_config(),
                p.policy().unwrap(),
                s.device_options().unwrap(),
                p.draft.clone(),
                p.importance(i),
            )
            .unwrap();
            thread::spawn(move || {
                let mut carrier = TcpCarrier::connect(addr).unwrap();
                run_session(&mut device, &mut carrier, &mut SimClock::default()).unwrap();
                carrier.shutdown();
                device
            })
        })
        .collect();
    for d in devices {
        let d = d.join().unwrap();
        let sum = d.summary();
        println!(
            "{}: {} tokens, {} offloads ({} accepted drafts), fallback {}",
            d.id(),
            sum.generated,
            sum.chunks_offloaded,
            sum.draft_tokens_accepted,
            sum.fallback
        );
    }
    let status = server.join().unwrap();
    println!(
        "server: {} verifications, {} prefills, {} resyncs",
        status.requests_served, status.prefills_served, status.resyncs
    );
}
