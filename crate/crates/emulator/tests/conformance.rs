use std::net::UdpSocket;
use std::time::Duration;

use num_complex::Complex32;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semlink_core::phy::{transmit_link_with, ChannelModel, LinkConfig, LocalChannel};
use semlink_emu::wire::{chunk_frame, Datagram, MsgType, Reassembler};
use semlink_emu::{calibrate, ClientError, EmuChannel, EmuClient, EmuConfig, EmuServer, StatsSnapshot};

fn server(cfg: EmuConfig) -> EmuServer {
    EmuServer::spawn("127.0.0.1:0", cfg).unwrap()
}

fn client(s: &EmuServer) -> EmuClient {
    EmuClient::connect(s.addr()).unwrap()
}

fn noise(n: usize, seed: u64) -> Vec<Complex32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| Complex32::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0))).collect()
}

fn raw(s: &EmuServer) -> UdpSocket {
    let sock = UdpSocket::bind("127.0.0.1:0").unwrap();
    sock.connect(s.addr()).unwrap();
    sock.set_read_timeout(Some(Duration::from_secs(2))).unwrap();
    sock
}

fn recv(sock: &UdpSocket) -> Datagram {
    let mut buf = [0u8; 2048];
    let n = sock.recv(&mut buf).unwrap();
    Datagram::decode(&buf[..n]).unwrap()
}

#[test]
fn ping_echoes_frame_id() {
    let s = server(EmuConfig::default());
    let sock = raw(&s);
    sock.send(&Datagram::control(MsgType::Ping, 0xdead_beef, b"hi").encode()).unwrap();
    let pong = recv(&sock);
    assert_eq!((pong.msg_type, pong.frame_id, pong.payload.as_slice()), (MsgType::Ping, 0xdead_beef, &b"hi"[..]));
    assert!(client(&s).ping().unwrap() < Duration::from_secs(2));
}

#[test]
fn noiseless_passthrough_is_bit_identical() {
    let s = server(EmuConfig::default());
    let mut c = client(&s);
    let mut x = noise(1000, 1);
    x.push(Complex32::new(f32::MIN_POSITIVE, -0.0));
    x.push(Complex32::new(f32::MAX, 1e-40));
    let y = c.send_frame(&x).unwrap();
    let bits = |v: &[Complex32]| v.iter().flat_map(|z| [z.re.to_bits(), z.im.to_bits()]).collect::<Vec<_>>();
    assert_eq!(bits(&y), bits(&x));
    assert_eq!(c.send_frame(&[]).unwrap(), vec![]);
}

#[test]
fn awgn_calibration() {
    let s = server(EmuConfig::default());
    let mut c = client(&s);
    assert!(calibrate(&mut c, f64::INFINITY, 10_000, 0).unwrap() >= 80.0);
    for snr in [0.0, 10.0] {
        let got = calibrate(&mut c, snr, 100_000, 7).unwrap();
        assert!((got - snr).abs() <= 0.5, "configured {snr} dB, measured {got:.3} dB");
    }
}

#[test]
fn consecutive_frames_keep_order() {
    let s = server(EmuConfig::default());
    let mut c = client(&s);
    for i in 0..10 {
        let x = noise(300 + i, i as u64);
        assert_eq!(c.send_frame(&x).unwrap(), x);
    }
    assert_eq!(c.stats().unwrap().frames_ok, 10);
}

#[test]
fn shuffled_chunks_reassemble() {
    let s = server(EmuConfig::default());
    let sock = raw(&s);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for frame_id in 0..5 {
        let x = noise(1000, frame_id as u64);
        let mut chunks = chunk_frame(MsgType::Data, frame_id, &x).unwrap();
        assert_eq!(chunks.len(), 6);
        chunks.shuffle(&mut rng);
        for d in &chunks {
            sock.send(&d.encode()).unwrap();
        }
        let mut r = Reassembler::new(Duration::from_secs(2));
        let y = loop {
            let d = recv(&sock);
            assert_eq!((d.msg_type, d.frame_id), (MsgType::DataResponse, frame_id));
            if let Some(y) = r.insert((), d, std::time::Instant::now()).unwrap() {
                break y;
            }
        };
        assert_eq!(y, x);
    }
}

#[test]
fn malformed_datagrams_do_not_disturb_a_frame() {
    let s = server(EmuConfig::default());
    let sock = raw(&s);
    let x = noise(400, 9);
    let chunks = chunk_frame(MsgType::Data, 77, &x).unwrap();
    sock.send(&chunks[0].encode()).unwrap();
    let mut bad_magic = chunks[1].encode();
    bad_magic[0] = 0;
    let mut bad_version = chunks[1].encode();
    bad_version[4] = 9;
    let mut conflicting = chunk_frame(MsgType::Data, 77, &noise(10, 1)).unwrap().remove(0);
    conflicting.payload.iter_mut().for_each(|b| *b = 0xff);
    for junk in [vec![1, 2, 3], bad_magic, bad_version, conflicting.encode(), vec![0; 1500]] {
        sock.send(&junk).unwrap();
    }
    sock.send(&chunks[2].encode()).unwrap();
    sock.send(&chunks[1].encode()).unwrap();
    let mut r = Reassembler::new(Duration::from_secs(2));
    let y = loop {
        if let Some(y) = r.insert((), recv(&sock), std::time::Instant::now()).unwrap() {
            break y;
        }
    };
    assert_eq!(y, x);
    let st = client(&s).stats().unwrap();
    assert_eq!(st, StatsSnapshot { frames_ok: 1, frames_dropped: 0, malformed: 5 });
}

#[test]
fn incomplete_frame_is_dropped_after_timeout() {
    let s = server(EmuConfig::default());
    let sock = raw(&s);
    sock.send(&chunk_frame(MsgType::Data, 1, &noise(400, 0)).unwrap()[0].encode()).unwrap();
    std::thread::sleep(Duration::from_millis(2500));
    assert_eq!(s.stats().frames_dropped, 1);
}

#[test]
fn config_changes_apply_to_later_frames() {
    let s = server(EmuConfig::default());
    let mut c = client(&s);
    let x = noise(500, 2);
    assert_eq!(c.send_frame(&x).unwrap(), x);
    c.set_config(&EmuConfig { channel: ChannelModel::Awgn, snr_db: 0.0, ..EmuConfig::default() }).unwrap();
    assert_ne!(c.send_frame(&x).unwrap(), x);
    c.set_config(&EmuConfig::default()).unwrap();
    assert_eq!(c.send_frame(&x).unwrap(), x);
}

#[test]
fn silent_peer_times_out_with_frame_id() {
    let dead = UdpSocket::bind("127.0.0.1:0").unwrap();
    let mut c = EmuClient::connect(dead.local_addr().unwrap()).unwrap().with_timeout(Duration::from_millis(50), 2);
    match c.send_frame(&noise(10, 0)) {
        Err(ClientError::Timeout { frame_id, attempts }) => assert_eq!((frame_id, attempts), (3, 3)),
        other => panic!("expected timeout, got {other:?}"),
    }
}

#[test]
fn short_response_is_a_length_error() {
    let fake = UdpSocket::bind("127.0.0.1:0").unwrap();
    let addr = fake.local_addr().unwrap();
    let t = std::thread::spawn(move || {
        let mut buf = [0u8; 2048];
        let (n, peer) = fake.recv_from(&mut buf).unwrap();
        let d = Datagram::decode(&buf[..n]).unwrap();
        for r in chunk_frame(MsgType::DataResponse, d.frame_id, &noise(3, 0)).unwrap() {
            fake.send_to(&r.encode(), peer).unwrap();
        }
    });
    let mut c = EmuClient::connect(addr).unwrap();
    assert!(matches!(c.send_frame(&noise(10, 0)), Err(ClientError::Length { sent: 10, got: 3, .. })));
    t.join().unwrap();
}

#[test]
fn concurrent_clients() {
    let s = server(EmuConfig::default());
    let handles: Vec<_> = (0..4)
        .map(|k| {
            let addr = s.addr();
            std::thread::spawn(move || {
                let mut c = EmuClient::connect(addr).unwrap();
                for i in 0..5 {
                    let x = noise(700, k * 100 + i);
                    assert_eq!(c.send_frame(&x).unwrap(), x);
                }
            })
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    assert_eq!(s.stats().frames_ok, 20);
}

#[test]
fn emulated_link_is_bit_identical_to_local_link() {
    let s = server(EmuConfig::default());
    let mut emu = EmuChannel::new(client(&s));
    let levels: Vec<f32> = noise(96, 5).iter().flat_map(|z| [z.re.signum() * 3.0, z.im.signum()]).collect();
    for (channel, snr) in [(ChannelModel::Noiseless, f64::INFINITY), (ChannelModel::Awgn, 5.0), (ChannelModel::RayleighMultipath { taps: 8 }, 10.0)] {
        let link = LinkConfig::default().with_channel(channel, snr).with_seed(11);
        let a = transmit_link_with(&levels, &link, &mut LocalChannel).unwrap();
        let b = transmit_link_with(&levels, &link, &mut emu).unwrap();
        assert_eq!(a.rx_samples, b.rx_samples, "{channel}");
        assert_eq!(a.levels, b.levels, "{channel}");
        assert_eq!(b.effective_gain.is_some(), !channel.is_fading());
    }
}

proptest! {
    #[test]
    fn reassembly_ignores_delivery_order(n in 0usize..2000, seed in any::<u64>()) {
        let x = noise(n, seed);
        let mut chunks = chunk_frame(MsgType::Data, 1, &x).unwrap();
        chunks.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut r = Reassembler::new(Duration::from_secs(2));
        let now = std::time::Instant::now();
        let k = chunks.len();
        for (i, d) in chunks.into_iter().enumerate() {
            let d = Datagram::decode(&d.encode()).unwrap();
            let out = r.insert(7u8, d, now).unwrap();
            prop_assert_eq!(out.is_some(), i + 1 == k);
            if let Some(y) = out {
                prop_assert_eq!(&y, &x);
            }
        }
    }
}
