//! `mailmill`: run a server, manage mailboxes, send, check, generate cover
//! traffic and benchmark.

use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use mailmill_bench::{bench_comm, bench_latency, bench_throughput, write_csv, write_gnuplot};
use mailmill_client::{AddressFile, CheckOutcome, Client, MailboxCredential};
use mailmill_core::{Modulus, Party, Prime128, TestPrime10007, VirtualAddress};
use mailmill_server::{ServerConfig, SHARED_SECRET_BYTES};
use rand::rngs::OsRng;
use rand::RngCore;

/// Exit status when a server rejects a write.
const EXIT_REJECTED: u8 = 3;
/// Exit status when a checked message fails its MAC.
const EXIT_INTEGRITY: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "mailmill", version, about = "Two-server private mailboxes")]
struct Cli {
    /// Message size B in bytes. Must match the servers.
    #[arg(long, global = true, env = "MAILMILL_MSG_SIZE", default_value_t = 160)]
    msg_size: usize,
    /// Run over the small test field instead of the 128-bit production field.
    #[arg(long, global = true, env = "MAILMILL_TEST_MODULUS", value_parser = ["10007"])]
    test_modulus: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct Servers {
    #[arg(long, env = "MAILMILL_SERVER_A")]
    server_a: SocketAddr,
    #[arg(long, env = "MAILMILL_SERVER_B")]
    server_b: SocketAddr,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Role {
    A,
    B,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BenchKind {
    Comm,
    Latency,
    Throughput,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one server of the pair.
    Serve {
        #[arg(long, env = "MAILMILL_ROLE")]
        role: Role,
        #[arg(long, env = "MAILMILL_LISTEN")]
        listen: SocketAddr,
        /// Address of server B; required for server A.
        #[arg(long, env = "MAILMILL_PEER")]
        peer: Option<SocketAddr>,
        /// File holding the 32-byte secret shared by both servers.
        #[arg(long, env = "MAILMILL_SECRET_FILE")]
        secret_file: PathBuf,
    },
    /// Write a fresh 32-byte server secret.
    GenSecret {
        #[arg(long)]
        out: PathBuf,
    },
    /// Register a mailbox; prints `p` and `v` and saves the credential.
    Register {
        #[command(flatten)]
        servers: Servers,
        /// Credential file to create.
        #[arg(long)]
        cred: PathBuf,
        /// Address file to hand to writers.
        #[arg(long)]
        address: Option<PathBuf>,
        /// Request this virtual address (32 hex digits).
        #[arg(long, value_parser = parse_address)]
        v: Option<VirtualAddress>,
        /// Skip the MAC master secret.
        #[arg(long)]
        no_mac: bool,
    },
    /// Write a message privately to a mailbox.
    Send {
        #[command(flatten)]
        servers: Servers,
        /// Address file of the recipient.
        #[arg(long)]
        to: PathBuf,
        /// File holding the message bytes.
        #[arg(long)]
        msg: PathBuf,
    },
    /// Read and clear a mailbox.
    Check {
        #[command(flatten)]
        servers: Servers,
        #[arg(long)]
        cred: PathBuf,
    },
    /// Send random writes to the dummy mailbox.
    Cover {
        #[command(flatten)]
        servers: Servers,
        /// Writes per second.
        #[arg(long)]
        rate: f64,
        /// Stop after this many writes instead of running until interrupted.
        #[arg(long)]
        count: Option<u64>,
    },
    /// Run a loopback benchmark and emit CSV.
    Bench {
        #[arg(value_enum)]
        kind: BenchKind,
        /// Active mailbox counts, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "1000,10000")]
        n: Vec<usize>,
        /// Message sizes for the latency sweep, comma separated.
        #[arg(long, value_delimiter = ',')]
        b: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        /// Concurrent writers for the throughput run.
        #[arg(long, default_value_t = 8)]
        concurrency: usize,
        /// Total writes for the throughput run.
        #[arg(long, default_value_t = 1000)]
        writes: usize,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write a whitespace-separated table for gnuplot.
        #[arg(long)]
        gnuplot: Option<PathBuf>,
    },
}

fn parse_address(s: &str) -> Result<VirtualAddress, String> {
    u128::from_str_radix(s.trim_start_matches("0x"), 16)
        .map(VirtualAddress)
        .map_err(|e| e.to_string())
}

fn read_secret(path: &Path) -> anyhow::Result<[u8; SHARED_SECRET_BYTES]> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    bytes
        .try_into()
        .map_err(|b: Vec<u8>| anyhow::anyhow!("{} holds {} bytes, expected {SHARED_SECRET_BYTES}", path.display(), b.len()))
}

async fn serve<M: Modulus>(cfg: ServerConfig) -> anyhow::Result<ExitCode> {
    let mut handle = mailmill_server::spawn::<M>(cfg).await.context("starting server")?;
    println!("listening on {}", handle.local_addr());
    tokio::signal::ctrl_c().await?;
    handle.shutdown();
    Ok(ExitCode::SUCCESS)
}

async fn connect<M: Modulus>(servers: &Servers, msg_bytes: usize) -> anyhow::Result<Client<M>> {
    Client::connect(servers.server_a, servers.server_b, msg_bytes)
        .await
        .context("connecting to servers")
}

async fn client_command<M: Modulus>(command: Command, msg_bytes: usize) -> anyhow::Result<ExitCode> {
    match command {
        Command::Register {
            servers,
            cred,
            address,
            v,
            no_mac,
        } => {
            let mut client = connect::<M>(&servers, msg_bytes).await?;
            let secret = (!no_mac).then(|| {
                let mut s = [0u8; 32];
                OsRng.fill_bytes(&mut s);
                s
            });
            let c = client.register(v, secret, &mut OsRng).await?;
            c.save(&cred).with_context(|| format!("writing {}", cred.display()))?;
            if let Some(path) = address {
                c.address().save(&path).with_context(|| format!("writing {}", path.display()))?;
            }
            println!("p={} v={:032x}", c.p, c.v.0);
        }
        Command::Send { servers, to, msg } => {
            let target = AddressFile::load(&to)
                .with_context(|| format!("reading {}", to.display()))?
                .target();
            let body = std::fs::read(&msg).with_context(|| format!("reading {}", msg.display()))?;
            let mut client = connect::<M>(&servers, msg_bytes).await?;
            let report = client.send(&target, &body, &mut OsRng).await?;
            if !report.accepted {
                eprintln!("write rejected");
                return Ok(ExitCode::from(EXIT_REJECTED));
            }
            println!("accepted");
        }
        Command::Check { servers, cred } => {
            let cred = MailboxCredential::load(&cred).with_context(|| format!("reading {}", cred.display()))?;
            let mut client = connect::<M>(&servers, msg_bytes).await?;
            match client.check(&cred).await? {
                CheckOutcome::Empty => println!("empty"),
                CheckOutcome::Message(bytes) => std::io::stdout().write_all(&bytes)?,
                CheckOutcome::IntegrityFailure => {
                    eprintln!("integrity failure");
                    return Ok(ExitCode::from(EXIT_INTEGRITY));
                }
            }
        }
        Command::Cover { servers, rate, count } => {
            if !(rate > 0.0 && rate.is_finite()) {
                bail!("--rate must be positive");
            }
            let mut client = connect::<M>(&servers, msg_bytes).await?;
            let dummy = client.dummy().await?;
            let mut tick = tokio::time::interval(Duration::from_secs_f64(1.0 / rate));
            let mut sent = 0u64;
            while count.is_none_or(|c| sent < c) {
                tokio::select! {
                    _ = tick.tick() => {}
                    _ = tokio::signal::ctrl_c() => break,
                }
                let report = client.cover_send(&dummy, &mut OsRng).await?;
                if !report.accepted {
                    eprintln!("cover write rejected");
                }
                sent += 1;
            }
            println!("sent {sent} cover writes");
        }
        Command::Serve { .. } | Command::GenSecret { .. } | Command::Bench { .. } => unreachable!("handled in run"),
    }
    Ok(ExitCode::SUCCESS)
}

async fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let small = cli.test_modulus.is_some();
    match cli.command {
        Command::Serve {
            role,
            listen,
            peer,
            secret_file,
        } => {
            let role = match role {
                Role::A => Party::A,
                Role::B => Party::B,
            };
            if role == Party::A && peer.is_none() {
                bail!("server A needs --peer");
            }
            let cfg = ServerConfig::new(role, listen, peer, read_secret(&secret_file)?, cli.msg_size);
            if small {
                serve::<TestPrime10007>(cfg).await
            } else {
                serve::<Prime128>(cfg).await
            }
        }
        Command::GenSecret { out } => {
            let mut s = [0u8; SHARED_SECRET_BYTES];
            OsRng.fill_bytes(&mut s);
            std::fs::write(&out, s).with_context(|| format!("writing {}", out.display()))?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Bench {
            kind,
            n,
            b,
            reps,
            concurrency,
            writes,
            out,
            gnuplot,
        } => {
            if small {
                bail!("benchmarks run over the production field only");
            }
            let records = match kind {
                BenchKind::Comm => bench_comm(&n, cli.msg_size).await?,
                BenchKind::Latency => {
                    let b = if b.is_empty() { vec![cli.msg_size] } else { b };
                    bench_latency(&n, &b, reps).await?
                }
                BenchKind::Throughput => {
                    let mut rows = Vec::new();
                    for &n in &n {
                        rows.push(bench_throughput(n, cli.msg_size, concurrency, writes).await?);
                    }
                    rows
                }
            };
            match out {
                Some(path) => write_csv(std::fs::File::create(&path)?, &records)?,
                None => write_csv(std::io::stdout().lock(), &records)?,
            }
            if let Some(path) = gnuplot {
                write_gnuplot(std::fs::File::create(&path)?, &records)?;
            }
            Ok(ExitCode::SUCCESS)
        }
        command if small => client_command::<TestPrime10007>(command, cli.msg_size).await,
        command => client_command::<Prime128>(command, cli.msg_size).await,
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli).await {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
