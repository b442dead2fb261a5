use std::io;
use std::net::{SocketAddr, ToSocketAddrs, UdpSocket};
use std::time::{Duration, Instant};

use num_complex::Complex32;
use semlink_core::phy::{ChannelBackend, ChannelModel, ChannelOutput, LinkConfig, PhyError, C64};

use crate::config::EmuConfig;
use crate::server::StatsSnapshot;
use crate::wire::{chunk_frame, Datagram, MsgType, Reassembler, WireError, STATS_REQUEST};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(2);
pub const DEFAULT_RETRIES: u32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("frame {frame_id}: no complete response after {attempts} attempt(s)")]
    Timeout { frame_id: u32, attempts: u32 },
    #[error("frame {frame_id}: sent {sent} samples, response has {got}")]
    Length { frame_id: u32, sent: usize, got: usize },
    #[error("service refused the config: {0}")]
    Rejected(String),
    #[error("unreadable stats reply `{0}`")]
    Stats(String),
}

/// Blocking client, one socket per instance. Every attempt of a request uses
/// a fresh frame id, so late replies to an abandoned attempt are ignored.
pub struct EmuClient {
    sock: UdpSocket,
    server: SocketAddr,
    next_id: u32,
    timeout: Duration,
    retries: u32,
}

enum Reply {
    Samples(Vec<Complex32>),
    Control(Vec<u8>),
}

impl EmuClient {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self, ClientError> {
        let server = addr
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "address resolves to nothing"))?;
        let local: SocketAddr = if server.is_ipv4() { ([0, 0, 0, 0], 0).into() } else { (std::net::Ipv6Addr::UNSPECIFIED, 0).into() };
        let sock = UdpSocket::bind(local)?;
        sock.connect(server)?;
        Ok(Self { sock, server, next_id: 1, timeout: DEFAULT_TIMEOUT, retries: DEFAULT_RETRIES })
    }

    pub fn with_timeout(mut self, timeout: Duration, retries: u32) -> Self {
        self.timeout = timeout;
        self.retries = retries;
        self
    }

    pub fn server(&self) -> SocketAddr {
        self.server
    }

    /// Sends one frame through the service's channel and returns the impaired
    /// samples in order.
    pub fn send_frame(&mut self, samples: &[Complex32]) -> Result<Vec<Complex32>, ClientError> {
        let n = samples.len();
        let (frame_id, reply) = self.request(|id| chunk_frame(MsgType::Data, id, samples), MsgType::DataResponse)?;
        match reply {
            Reply::Samples(s) if s.len() == n => Ok(s),
            Reply::Samples(s) => Err(ClientError::Length { frame_id, sent: n, got: s.len() }),
            Reply::Control(_) => unreachable!("data request yields samples"),
        }
    }

    /// Replaces the service's channel. Frames already answered are unaffected.
    pub fn set_config(&mut self, cfg: &EmuConfig) -> Result<(), ClientError> {
        let text = cfg.to_text();
        let reply = self.control(MsgType::Config, text.as_bytes(), MsgType::ConfigAck)?;
        if reply == b"ok" {
            Ok(())
        } else {
            Err(ClientError::Rejected(String::from_utf8_lossy(&reply).into_owned()))
        }
    }

    /// Round-trip time of an empty ping.
    pub fn ping(&mut self) -> Result<Duration, ClientError> {
        let t = Instant::now();
        self.control(MsgType::Ping, b"", MsgType::Ping)?;
        Ok(t.elapsed())
    }

    pub fn stats(&mut self) -> Result<StatsSnapshot, ClientError> {
        let reply = self.control(MsgType::Ping, STATS_REQUEST, MsgType::Ping)?;
        let text = String::from_utf8_lossy(&reply).into_owned();
        StatsSnapshot::parse(&text).ok_or(ClientError::Stats(text))
    }

    fn control(&mut self, ty: MsgType, payload: &[u8], expect: MsgType) -> Result<Vec<u8>, ClientError> {
        match self.request(|id| Ok(vec![Datagram::control(ty, id, payload)]), expect)?.1 {
            Reply::Control(p) => Ok(p),
            Reply::Samples(_) => unreachable!("control request yields a payload"),
        }
    }

    fn request(
        &mut self,
        build: impl Fn(u32) -> Result<Vec<Datagram>, WireError>,
        expect: MsgType,
    ) -> Result<(u32, Reply), ClientError> {
        let mut buf = vec![0u8; 65536];
        let mut frame_id = self.next_id;
        for attempt in 0..=self.retries {
            frame_id = self.next_id;
            self.next_id = self.next_id.wrapping_add(1);
            for d in build(frame_id)? {
                self.sock.send(&d.encode())?;
            }
            let deadline = Instant::now() + self.timeout;
            let mut reasm = Reassembler::new(self.timeout);
            loop {
                let left = deadline.saturating_duration_since(Instant::now());
                if left.is_zero() {
                    break;
                }
                self.sock.set_read_timeout(Some(left))?;
                let n = match self.sock.recv(&mut buf) {
                    Ok(n) => n,
                    Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => break,
                    Err(e) => return Err(e.into()),
                };
                let Ok(d) = Datagram::decode(&buf[..n]) else { continue };
                if d.frame_id != frame_id || d.msg_type != expect {
                    continue;
                }
                if expect != MsgType::DataResponse {
                    return Ok((frame_id, Reply::Control(d.payload)));
                }
                if let Some(s) = reasm.insert((), d, Instant::now())? {
                    return Ok((frame_id, Reply::Samples(s)));
                }
            }
            log::debug!("frame {frame_id}: attempt {} timed out", attempt + 1);
        }
        Err(ClientError::Timeout { frame_id, attempts: self.retries + 1 })
    }
}

/// Routes the link's time-domain samples through the service. Each call
/// first pushes the link's channel, SNR and seed, so a frame sees the same
/// realization as [`semlink_core::phy::LocalChannel`] up to f32 rounding.
pub struct EmuChannel {
    pub client: EmuClient,
}

impl EmuChannel {
    pub fn new(client: EmuClient) -> Self {
        Self { client }
    }
}

impl ChannelBackend for EmuChannel {
    fn apply(&mut self, samples: &[C64], cfg: &LinkConfig) -> Result<ChannelOutput, PhyError> {
        let backend = |e: ClientError| PhyError::Backend(e.to_string());
        self.client.set_config(&EmuConfig::from_link(cfg)).map_err(backend)?;
        let tx: Vec<Complex32> = samples.iter().map(|s| Complex32::new(s.re as f32, s.im as f32)).collect();
        let rx = self.client.send_frame(&tx).map_err(backend)?;
        Ok(ChannelOutput { samples: rx.iter().map(|s| C64::new(s.re as f64, s.im as f64)).collect(), gains: None })
    }
}

/// Samples per frame during calibration, small enough that a burst of
/// chunks fits comfortably in default socket buffers.
pub const CALIBRATION_FRAME: usize = 4096;

/// Unit-modulus reference samples with golden-ratio phase steps.
pub fn reference_samples(n: usize) -> Vec<Complex32> {
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    (0..n)
        .map(|i| {
            let t = std::f64::consts::TAU * (i as f64 * phi).fract();
            Complex32::new(t.cos() as f32, t.sin() as f32)
        })
        .collect()
}

/// Configures AWGN at `snr_db` (noiseless when infinite), sends `n_samples`
/// unit-power samples and returns `10 log10(P_signal / P_error)`.
pub fn calibrate(client: &mut EmuClient, snr_db: f64, n_samples: usize, seed: u64) -> Result<f64, ClientError> {
    let channel = if snr_db == f64::INFINITY { ChannelModel::Noiseless } else { ChannelModel::Awgn };
    let cfg = EmuConfig { channel, snr_db, seed, ..EmuConfig::default() };
    client.set_config(&cfg)?;
    let x = reference_samples(n_samples);
    let (mut ps, mut pe) = (0.0f64, 0.0f64);
    for chunk in x.chunks(CALIBRATION_FRAME) {
        let y = client.send_frame(chunk)?;
        for (a, b) in chunk.iter().zip(&y) {
            ps += a.norm_sqr() as f64;
            pe += (b - a).norm_sqr() as f64;
        }
    }
    Ok(10.0 * (ps / pe).log10())
}
