use std::future::Future;
use std::io;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use num_complex::Complex32;
use semlink_core::phy::{ChannelBackend, LocalChannel, PhyError, C64};
use tokio::net::UdpSocket;

use crate::config::EmuConfig;
use crate::wire::{chunk_frame, Datagram, MsgType, Reassembler, STATS_REQUEST};

/// Incomplete frames older than this are discarded.
pub const FRAME_TIMEOUT: Duration = Duration::from_secs(2);

#[derive(Debug, Default)]
pub struct Stats {
    ok: AtomicU64,
    dropped: AtomicU64,
    malformed: AtomicU64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StatsSnapshot {
    pub frames_ok: u64,
    pub frames_dropped: u64,
    pub malformed: u64,
}

impl Stats {
    pub fn snapshot(&self) -> StatsSnapshot {
        StatsSnapshot {
            frames_ok: self.ok.load(Ordering::Relaxed),
            frames_dropped: self.dropped.load(Ordering::Relaxed),
            malformed: self.malformed.load(Ordering::Relaxed),
        }
    }

    fn bump(counter: &AtomicU64, n: u64) {
        counter.fetch_add(n, Ordering::Relaxed);
    }
}

impl StatsSnapshot {
    /// One `name value` line per counter.
    pub fn to_text(&self) -> String {
        format!("frames_ok {}\nframes_dropped {}\nmalformed {}\n", self.frames_ok, self.frames_dropped, self.malformed)
    }

    pub fn parse(text: &str) -> Option<Self> {
        let mut s = StatsSnapshot::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once(' ')?;
            let v: u64 = v.trim().parse().ok()?;
            match k {
                "frames_ok" => s.frames_ok = v,
                "frames_dropped" => s.frames_dropped = v,
                "malformed" => s.malformed = v,
                _ => return None,
            }
        }
        Some(s)
    }
}

/// Runs the configured channel over one frame with the given noise/fading seed.
pub fn apply_channel(cfg: &EmuConfig, seed: u64, samples: &[Complex32]) -> Result<Vec<Complex32>, PhyError> {
    let x: Vec<C64> = samples.iter().map(|s| C64::new(s.re as f64, s.im as f64)).collect();
    let y = LocalChannel.apply(&x, &cfg.link(seed))?;
    Ok(y.samples.iter().map(|s| Complex32::new(s.re as f32, s.im as f32)).collect())
}

struct State {
    cfg: EmuConfig,
    /// Frames processed since `cfg` was applied.
    frame_no: u64,
    reasm: Reassembler<(SocketAddr, u32)>,
    stats: Arc<Stats>,
}

impl State {
    /// Handles one datagram and returns the datagrams to send back. A frame is
    /// processed start to finish inside one call, so a config swap can never
    /// land in the middle of it.
    fn handle(&mut self, buf: &[u8], peer: SocketAddr, now: Instant) -> Vec<Datagram> {
        let d = match Datagram::decode(buf) {
            Ok(d) => d,
            Err(e) => {
                log::debug!("{peer}: {e}");
                Stats::bump(&self.stats.malformed, 1);
                return Vec::new();
            }
        };
        match d.msg_type {
            MsgType::Data => {
                let frame_id = d.frame_id;
                let samples = match self.reasm.insert((peer, frame_id), d, now) {
                    Ok(Some(s)) => s,
                    Ok(None) => return Vec::new(),
                    Err(e) => {
                        log::debug!("{peer}: {e}");
                        Stats::bump(&self.stats.malformed, 1);
                        return Vec::new();
                    }
                };
                let seed = self.cfg.seed.wrapping_add(self.frame_no);
                self.frame_no += 1;
                match apply_channel(&self.cfg, seed, &samples).map(|y| chunk_frame(MsgType::DataResponse, frame_id, &y)) {
                    Ok(Ok(out)) => {
                        Stats::bump(&self.stats.ok, 1);
                        out
                    }
                    Ok(Err(e)) => self.drop_frame(peer, frame_id, &e),
                    Err(e) => self.drop_frame(peer, frame_id, &e),
                }
            }
            MsgType::Config => {
                let reply = match std::str::from_utf8(&d.payload).map_err(|e| e.to_string()).and_then(|t| t.parse::<EmuConfig>().map_err(|e| e.to_string())) {
                    Ok(cfg) => {
                        log::info!("{peer}: channel {} at {} dB, seed {}", cfg.channel, cfg.snr_db, cfg.seed);
                        self.cfg = cfg;
                        self.frame_no = 0;
                        "ok".to_string()
                    }
                    Err(e) => format!("error: {e}"),
                };
                vec![Datagram::control(MsgType::ConfigAck, d.frame_id, reply.as_bytes())]
            }
            MsgType::Ping if d.payload == STATS_REQUEST => {
                vec![Datagram::control(MsgType::Ping, d.frame_id, self.stats.snapshot().to_text().as_bytes())]
            }
            MsgType::Ping => vec![Datagram::control(MsgType::Ping, d.frame_id, &d.payload)],
            MsgType::DataResponse | MsgType::ConfigAck => {
                Stats::bump(&self.stats.malformed, 1);
                Vec::new()
            }
        }
    }

    fn drop_frame(&self, peer: SocketAddr, frame_id: u32, e: &dyn std::fmt::Display) -> Vec<Datagram> {
        log::warn!("{peer}: frame {frame_id} dropped: {e}");
        Stats::bump(&self.stats.dropped, 1);
        Vec::new()
    }
}

/// Serves datagrams on `socket` until `shutdown` resolves.
pub async fn serve(
    socket: UdpSocket,
    initial: EmuConfig,
    stats: Arc<Stats>,
    shutdown: impl Future<Output = ()>,
) -> io::Result<()> {
    initial.validate().map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))?;
    let mut st = State { cfg: initial, frame_no: 0, reasm: Reassembler::new(FRAME_TIMEOUT), stats };
    let mut buf = vec![0u8; 65536];
    let mut sweep = tokio::time::interval(Duration::from_millis(200));
    tokio::pin!(shutdown);
    loop {
        tokio::select! {
            _ = &mut shutdown => return Ok(()),
            _ = sweep.tick() => {
                let n = st.reasm.expire(Instant::now());
                if n > 0 {
                    log::warn!("{n} incomplete frame(s) timed out");
                    Stats::bump(&st.stats.dropped, n as u64);
                }
            }
            r = socket.recv_from(&mut buf) => {
                let (n, peer) = match r {
                    Ok(x) => x,
                    Err(e) => {
                        log::debug!("recv: {e}");
                        continue;
                    }
                };
                for d in st.handle(&buf[..n], peer, Instant::now()) {
                    if let Err(e) = socket.send_to(&d.encode(), peer).await {
                        log::warn!("send to {peer}: {e}");
                        break;
                    }
                }
            }
        }
    }
}

/// A service running on its own thread with a single-threaded runtime.
pub struct EmuServer {
    addr: SocketAddr,
    stats: Arc<Stats>,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<io::Result<()>>>,
}

impl EmuServer {
    /// Binds `bind` (port 0 picks a free port) and starts serving.
    pub fn spawn(bind: &str, cfg: EmuConfig) -> io::Result<Self> {
        cfg.validate().map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))?;
        let std_sock = std::net::UdpSocket::bind(bind)?;
        std_sock.set_nonblocking(true)?;
        let addr = std_sock.local_addr()?;
        let stats = Arc::new(Stats::default());
        let (tx, rx) = tokio::sync::oneshot::channel();
        let st = stats.clone();
        let thread = std::thread::Builder::new().name("semlink-emu".into()).spawn(move || {
            let rt = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
            rt.block_on(async move {
                let sock = UdpSocket::from_std(std_sock)?;
                serve(sock, cfg, st, async {
                    let _ = rx.await;
                })
                .await
            })
        })?;
        Ok(Self { addr, stats, stop: Some(tx), thread: Some(thread) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stats(&self) -> StatsSnapshot {
        self.stats.snapshot()
    }

    /// Blocks until the service exits (it only does on error or `stop`).
    pub fn wait(mut self) -> io::Result<()> {
        self.join()
    }

    pub fn stop(mut self) -> io::Result<()> {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        self.join()
    }

    fn join(&mut self) -> io::Result<()> {
        match self.thread.take().map(|t| t.join()) {
            Some(Ok(r)) => r,
            Some(Err(_)) => Err(io::Error::other("emulator thread panicked")),
            None => Ok(()),
        }
    }
}

impl Drop for EmuServer {
    fn drop(&mut self) {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
            let _ = self.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use semlink_core::phy::ChannelModel;

    fn state() -> State {
        State { cfg: EmuConfig::default(), frame_no: 0, reasm: Reassembler::new(FRAME_TIMEOUT), stats: Arc::default() }
    }

    fn peer(port: u16) -> SocketAddr {
        SocketAddr::from(([127, 0, 0, 1], port))
    }

    #[test]
    fn config_swap_resets_frame_seed() {
        let mut st = state();
        let cfg = EmuConfig { channel: ChannelModel::Awgn, snr_db: 5.0, seed: 40, ..EmuConfig::default() };
        let x: Vec<Complex32> = (0..50).map(|i| Complex32::new(i as f32 * 0.01, 0.5)).collect();
        let run = |st: &mut State| -> Vec<Datagram> {
            let mut out = Vec::new();
            for d in chunk_frame(MsgType::Data, 1, &x).unwrap() {
                out.extend(st.handle(&d.encode(), peer(1), Instant::now()));
            }
            out
        };
        let ack = st.handle(&Datagram::control(MsgType::Config, 9, cfg.to_text().as_bytes()).encode(), peer(1), Instant::now());
        assert_eq!(ack[0].payload, b"ok");
        assert_eq!(ack[0].frame_id, 9);
        let a = run(&mut st);
        let b = run(&mut st);
        assert_ne!(a, b);
        st.handle(&Datagram::control(MsgType::Config, 10, cfg.to_text().as_bytes()).encode(), peer(1), Instant::now());
        assert_eq!(run(&mut st), a);
        assert_eq!(a[0].payload.len(), 50 * 8);
        let first: Vec<Complex32> = apply_channel(&cfg, 40, &x).unwrap();
        let got: Vec<f32> = a[0].payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        assert_eq!(got[0], first[0].re);
    }

    #[test]
    fn bad_config_is_refused_and_kept() {
        let mut st = state();
        let r = st.handle(&Datagram::control(MsgType::Config, 1, b"channel=laser").encode(), peer(1), Instant::now());
        assert!(String::from_utf8_lossy(&r[0].payload).starts_with("error:"));
        assert_eq!(st.cfg, EmuConfig::default());
    }

    #[test]
    fn frames_from_different_peers_do_not_mix() {
        let mut st = state();
        let x: Vec<Complex32> = (0..300).map(|i| Complex32::new(i as f32, 0.0)).collect();
        let y: Vec<Complex32> = (0..300).map(|i| Complex32::new(0.0, i as f32)).collect();
        let cx = chunk_frame(MsgType::Data, 5, &x).unwrap();
        let cy = chunk_frame(MsgType::Data, 5, &y).unwrap();
        let now = Instant::now();
        assert!(st.handle(&cx[0].encode(), peer(1), now).is_empty());
        assert!(st.handle(&cy[1].encode(), peer(2), now).is_empty());
        let rx = st.handle(&cx[1].encode(), peer(1), now);
        let ry = st.handle(&cy[0].encode(), peer(2), now);
        assert_eq!(rx, chunk_frame(MsgType::DataResponse, 5, &x).unwrap());
        assert_eq!(ry, chunk_frame(MsgType::DataResponse, 5, &y).unwrap());
        assert_eq!(st.stats.snapshot(), StatsSnapshot { frames_ok: 2, frames_dropped: 0, malformed: 0 });
    }

    #[test]
    fn stats_text_round_trip() {
        let s = StatsSnapshot { frames_ok: 3, frames_dropped: 1, malformed: 7 };
        assert_eq!(StatsSnapshot::parse(&s.to_text()), Some(s));
        assert_eq!(StatsSnapshot::parse("bogus 1"), None);
    }
}
