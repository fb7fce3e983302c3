//! Desk-scale measurements over a live loopback server pair.
//!
//! Byte counts come from the client's and servers' wire counters. Timings are
//! medians over repeated writes unless stated otherwise.

use std::io::{self, Write};
use std::time::{Duration, Instant};

use mailmill_client::{CheckOutcome, Client, ClientError, MailboxCredential, SendReport};
use mailmill_core::audit::{self, AuditSeed};
use mailmill_core::dpf::{self, DpfParams};
use mailmill_core::field::Prime128;
use mailmill_core::mac;
use mailmill_core::payload::MessageLayout;
use mailmill_core::wire::ErrorCode;
use mailmill_server::{spawn_pair, ServerHandle};
use rand::rngs::OsRng;
use rand::RngCore;

pub const CSV_HEADER: &str = "n,B,client_bytes,server_bytes,write_latency_us,audit_client_us,audit_server_us,throughput_wps";

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("server refused: {0}")]
    Server(ErrorCode),
    #[error("roundtrip returned the wrong message")]
    Corrupted,
}

impl From<ErrorCode> for BenchError {
    fn from(code: ErrorCode) -> Self {
        BenchError::Server(code)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BenchRecord {
    /// Active mailboxes, dummy included.
    pub n: usize,
    pub msg_bytes: usize,
    /// Both directions, both servers, per write.
    pub client_bytes: u64,
    /// Server-to-server traffic per write, both directions.
    pub server_bytes: u64,
    /// One send followed by one check.
    pub write_latency_us: f64,
    pub audit_client_us: f64,
    /// Per server.
    pub audit_server_us: f64,
    pub throughput_wps: f64,
    // The fields below are not written to CSV.
    pub client_upload: u64,
    /// Local client computation per send.
    pub client_send_us: f64,
    pub rejected: u64,
    /// Fastest of the measured writes. Host interference only adds time, so
    /// this tracks the intrinsic cost on a shared machine.
    pub min_latency_us: f64,
    /// Fastest client send computation, timed while the servers sit idle.
    pub idle_send_us: f64,
    /// The audit part of `idle_send_us`.
    pub idle_audit_us: f64,
}

impl BenchRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.1},{:.2},{:.2},{:.2}",
            self.n,
            self.msg_bytes,
            self.client_bytes,
            self.server_bytes,
            self.write_latency_us,
            self.audit_client_us,
            self.audit_server_us,
            self.throughput_wps
        )
    }
}

pub fn write_csv<W: Write>(mut out: W, records: &[BenchRecord]) -> io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in records {
        writeln!(out, "{}", r.csv_row())?;
    }
    Ok(())
}

/// Whitespace-separated columns with a commented header.
pub fn write_gnuplot<W: Write>(mut out: W, records: &[BenchRecord]) -> io::Result<()> {
    writeln!(out, "# {}", CSV_HEADER.replace(',', " "))?;
    for r in records {
        writeln!(out, "{}", r.csv_row().replace(',', " "))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Ordinary least squares of `ys` on `xs`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> LinearFit {
    assert_eq!(xs.len(), ys.len());
    assert!(xs.len() >= 2, "need two points for a fit");
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r_squared = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    LinearFit {
        slope,
        intercept: my - slope * mx,
        r_squared,
    }
}

pub fn median(xs: &mut [f64]) -> f64 {
    assert!(!xs.is_empty());
    xs.sort_by(f64::total_cmp);
    let mid = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[mid]
    } else {
        (xs[mid - 1] + xs[mid]) / 2.0
    }
}

fn micros(d: Duration) -> f64 {
    d.as_secs_f64() * 1e6
}

/// Offline client sends timed per record.
pub const IDLE_REPS: usize = 2000;

/// One measured send plus the check that drains it.
#[derive(Debug, Clone)]
pub struct WriteSample {
    pub report: SendReport,
    pub latency: Duration,
    pub server_bytes: u64,
    pub audit_server: Duration,
}

/// A loopback server pair with one owner client and a MACed target mailbox.
pub struct Testbed {
    pub servers: (ServerHandle<Prime128>, ServerHandle<Prime128>),
    pub client: Client<Prime128>,
    pub target: MailboxCredential,
    msg_bytes: usize,
}

impl Testbed {
    pub async fn start(msg_bytes: usize) -> Result<Self, BenchError> {
        let servers = spawn_pair::<Prime128>(msg_bytes).await?;
        let mut client = Client::connect(servers.0.local_addr(), servers.1.local_addr(), msg_bytes).await?;
        let mut secret = [0u8; 32];
        OsRng.fill_bytes(&mut secret);
        let target = client.register(None, Some(secret), &mut OsRng).await?;
        Ok(Self {
            servers,
            client,
            target,
            msg_bytes,
        })
    }

    pub fn msg_bytes(&self) -> usize {
        self.msg_bytes
    }

    pub fn n(&self) -> usize {
        self.servers.0.inspect(|r| r.vault().len())
    }

    /// Registers throwaway mailboxes until `n` are active.
    pub async fn grow_to(&mut self, n: usize) -> Result<(), BenchError> {
        let have = self.n();
        if n > have {
            self.servers.0.preload(n - have).await?;
        }
        Ok(())
    }

    /// Sends a random message to the target and checks it back.
    pub async fn measure_write(&mut self) -> Result<WriteSample, BenchError> {
        let (a, b) = &self.servers;
        let room = mailmill_core::mac::capacity(self.msg_bytes, true);
        let mut msg = vec![0u8; room];
        OsRng.fill_bytes(&mut msg);
        let peer_before = a.traffic().peer_out + b.traffic().peer_out;
        let timings_before = (a.timings(), b.timings());
        let start = Instant::now();
        let report = self.client.send(&self.target.target(), &msg, &mut OsRng).await?;
        a.sync().await?;
        let server_bytes = a.traffic().peer_out + b.traffic().peer_out - peer_before;
        let outcome = self.client.check(&self.target).await?;
        let latency = start.elapsed();
        if outcome != CheckOutcome::Message(msg) {
            return Err(BenchError::Corrupted);
        }
        let audit_server = ((a.timings() - timings_before.0).audit + (b.timings() - timings_before.1).audit) / 2;
        Ok(WriteSample {
            report,
            latency,
            server_bytes,
            audit_server,
        })
    }

    /// Fastest `(send, audit)` client computation over `reps` offline sends
    /// to the target, with no server work running alongside.
    pub fn idle_client(&self, reps: usize) -> (Duration, Duration) {
        let layout = MessageLayout::new::<Prime128>(self.msg_bytes);
        let params = DpfParams::production(layout.width());
        let target = self.target.target();
        let mut msg = vec![0u8; mac::capacity(self.msg_bytes, true)];
        let mut send = Vec::with_capacity(reps);
        let mut audit_times = Vec::with_capacity(reps);
        for _ in 0..reps {
            OsRng.fill_bytes(&mut msg);
            let mut seed = [0u8; 16];
            OsRng.fill_bytes(&mut seed);
            let start = Instant::now();
            let framed = mac::frame(&msg, self.msg_bytes, target.mac_key.as_ref()).expect("message fits");
            let payload = layout.payload::<Prime128>(&framed).expect("frame fits");
            let (ka, kb) = dpf::gen(params, target.v, &payload, &mut OsRng).expect("payload width matches params");
            let t = Instant::now();
            let checks = audit::target_checks(&AuditSeed(seed), target.p, target.v, &ka.eval(target.v), &kb.eval(target.v));
            std::hint::black_box(audit::snip_gen(&checks, &mut OsRng));
            audit_times.push(micros(t.elapsed()));
            send.push(micros(start.elapsed()));
        }
        let fastest = |v: &[f64]| Duration::from_secs_f64(v.iter().cloned().fold(f64::INFINITY, f64::min) / 1e6);
        (fastest(&send), fastest(&audit_times))
    }

    /// Median record over `reps` writes at the current size, after one
    /// discarded warm-up write. Idle client timings are spread between the
    /// writes.
    pub async fn record(&mut self, reps: usize) -> Result<BenchRecord, BenchError> {
        assert!(reps > 0);
        self.measure_write().await?;
        let mut samples = Vec::with_capacity(reps);
        let mut idle = (Duration::MAX, Duration::MAX);
        for _ in 0..reps {
            samples.push(self.measure_write().await?);
            let (send, audit) = self.idle_client(IDLE_REPS.div_ceil(reps));
            idle = (idle.0.min(send), idle.1.min(audit));
        }
        let med = |f: &dyn Fn(&WriteSample) -> f64| median(&mut samples.iter().map(f).collect::<Vec<_>>());
        let first = &samples[0].report;
        Ok(BenchRecord {
            n: self.n(),
            msg_bytes: self.msg_bytes,
            client_bytes: first.client_bytes(),
            server_bytes: samples[0].server_bytes,
            write_latency_us: med(&|s| micros(s.latency)),
            min_latency_us: samples.iter().map(|s| micros(s.latency)).fold(f64::INFINITY, f64::min),
            audit_client_us: med(&|s| micros(s.report.audit_client)),
            audit_server_us: med(&|s| micros(s.audit_server)),
            throughput_wps: 1e6 / med(&|s| micros(s.latency)),
            client_upload: first.upload.iter().sum(),
            client_send_us: med(&|s| micros(s.report.client_compute)),
            rejected: samples.iter().filter(|s| !s.report.accepted).count() as u64,
            idle_send_us: micros(idle.0),
            idle_audit_us: micros(idle.1),
        })
    }
}

/// Bytes per write for each active-set size. Byte counts are exact, so one
/// write per size suffices; two are taken to catch any drift.
pub async fn bench_comm(n_list: &[usize], msg_bytes: usize) -> Result<Vec<BenchRecord>, BenchError> {
    let mut sizes = n_list.to_vec();
    sizes.sort_unstable();
    let mut bed = Testbed::start(msg_bytes).await?;
    let mut out = Vec::new();
    for n in sizes {
        bed.grow_to(n).await?;
        let rec = bed.record(2).await?;
        out.push(rec);
    }
    Ok(out)
}

/// Write-plus-read latency for every `(n, B)` pair, `reps` writes each.
pub async fn bench_latency(n_list: &[usize], b_list: &[usize], reps: usize) -> Result<Vec<BenchRecord>, BenchError> {
    let mut sizes = n_list.to_vec();
    sizes.sort_unstable();
    let mut out = Vec::new();
    for &msg_bytes in b_list {
        let mut bed = Testbed::start(msg_bytes).await?;
        for &n in &sizes {
            bed.grow_to(n).await?;
            out.push(bed.record(reps).await?);
        }
    }
    Ok(out)
}

/// Sustained accepted writes per second from `concurrency` clients sending
/// `writes` messages in total. Latency and audit figures are means.
pub async fn bench_throughput(n: usize, msg_bytes: usize, concurrency: usize, writes: usize) -> Result<BenchRecord, BenchError> {
    assert!(concurrency > 0);
    let mut bed = Testbed::start(msg_bytes).await?;
    bed.grow_to(n).await?;
    let (a, b) = (&bed.servers.0, &bed.servers.1);
    let addrs = (a.local_addr(), b.local_addr());
    let mut workers = Vec::with_capacity(concurrency);
    for w in 0..concurrency {
        let mut client = Client::<Prime128>::connect(addrs.0, addrs.1, msg_bytes).await?;
        let target = client.register(None, None, &mut OsRng).await?.target();
        let share = writes / concurrency + usize::from(w < writes % concurrency);
        workers.push((client, target, share));
    }
    let before = (a.traffic(), b.traffic(), a.timings(), b.timings(), a.counts(), b.counts());
    let start = Instant::now();
    let mut tasks = Vec::with_capacity(concurrency);
    for (mut client, target, share) in workers {
        tasks.push(tokio::spawn(async move {
            let mut reports = Vec::with_capacity(share);
            let mut msg = vec![0u8; mailmill_core::mac::capacity(msg_bytes, false)];
            for _ in 0..share {
                OsRng.fill_bytes(&mut msg);
                let t = Instant::now();
                let report = client.send(&target, &msg, &mut OsRng).await?;
                reports.push((report, t.elapsed()));
            }
            Ok::<_, ClientError>(reports)
        }));
    }
    let mut reports = Vec::with_capacity(writes);
    for t in tasks {
        reports.extend(t.await.map_err(|e| io::Error::other(e.to_string()))??);
    }
    let elapsed = start.elapsed();
    let total = reports.len().max(1) as f64;
    let accepted = reports.iter().filter(|(r, _)| r.accepted).count();
    let rejected_a = a.counts().rejected - before.4.rejected;
    let rejected_b = b.counts().rejected - before.5.rejected;
    let peer = (a.traffic() - before.0).peer_out + (b.traffic() - before.1).peer_out;
    let audit_server = (a.timings() - before.2).audit + (b.timings() - before.3).audit;
    let mean = |f: &dyn Fn(&(SendReport, Duration)) -> Duration| reports.iter().map(f).sum::<Duration>().as_secs_f64() * 1e6 / total;
    Ok(BenchRecord {
        n: bed.n(),
        msg_bytes,
        client_bytes: reports.first().map_or(0, |(r, _)| r.client_bytes()),
        server_bytes: (peer as f64 / total).round() as u64,
        write_latency_us: mean(&|(_, d)| *d),
        audit_client_us: mean(&|(r, _)| r.audit_client),
        audit_server_us: audit_server.as_secs_f64() * 1e6 / (2.0 * total),
        throughput_wps: accepted as f64 / elapsed.as_secs_f64(),
        client_upload: reports.first().map_or(0, |(r, _)| r.upload.iter().sum()),
        client_send_us: mean(&|(r, _)| r.client_compute),
        rejected: rejected_a.max(rejected_b).max((reports.len() - accepted) as u64),
        ..Default::default()
    })
}
