//! Service launcher and operator tooling.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use tracing::{error, info};
use tracing_subscriber::EnvFilter;

use cepless::canonical::to_canonical_string;
use cepless::node_manager::{ControlClient, ControlServer, NodeControl, NodeManager, NodeManagerConfig};
use cepless::queue_server::{serve, ServerConfig, DEFAULT_MAX_QUEUE_ITEMS};
use cepless::registry::{NewOperator, Registry};

#[derive(Debug, Parser)]
#[command(about = "Serverless operator services")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Serve named in-memory queues.
    QueueServer {
        #[arg(long, env = "CEPLESS_QUEUE_ADDR", default_value = "127.0.0.1:6480")]
        bind: String,
        #[arg(long, default_value_t = DEFAULT_MAX_QUEUE_ITEMS)]
        max_queue_items: usize,
    },
    /// Deploy and supervise workers, controlled over the control port.
    NodeManager {
        #[arg(long, default_value = "127.0.0.1:6481")]
        bind: String,
        #[arg(long, env = "CEPLESS_QUEUE_ADDR", default_value = "127.0.0.1:6480")]
        queue_addr: String,
        #[arg(long, env = "CEPLESS_REGISTRY")]
        registry_root: PathBuf,
        /// Input batch size handed to workers.
        #[arg(long, default_value_t = 1000)]
        batch_size: usize,
        #[arg(long, default_value_t = 50_000)]
        backoff_ns: u64,
    },
    /// Publish an operator package: `publish NAME VERSION DIR -- COMMAND...`.
    Publish {
        name: String,
        version: String,
        package: PathBuf,
        #[arg(long, env = "CEPLESS_REGISTRY")]
        registry_root: PathBuf,
        /// Descriptor config entries, `key=value`.
        #[arg(long = "config", value_parser = parse_kv)]
        config: Vec<(String, String)>,
        #[arg(last = true, required = true)]
        command: Vec<String>,
    },
    /// List published operators.
    List {
        #[arg(long, env = "CEPLESS_REGISTRY")]
        registry_root: PathBuf,
    },
    /// Talk to a running node manager.
    Ctl {
        #[arg(long, default_value = "127.0.0.1:6481")]
        control: String,
        #[command(subcommand)]
        action: CtlAction,
    },
}

#[derive(Debug, Subcommand)]
enum CtlAction {
    Deploy { name: String, version: Option<String> },
    Update { instance_id: String, version: String },
    Remove { instance_id: String },
    Status,
}

fn parse_kv(s: &str) -> Result<(String, String), String> {
    s.split_once('=').map(|(k, v)| (k.to_owned(), v.to_owned())).ok_or_else(|| format!("expected key=value, got `{s}`"))
}

fn run(cmd: Cmd) -> Result<(), Box<dyn std::error::Error>> {
    match cmd {
        Cmd::QueueServer { bind, max_queue_items } => {
            info!(%bind, "queue server starting");
            serve(bind.as_str(), ServerConfig { max_queue_items })?;
        }
        Cmd::NodeManager { bind, queue_addr, registry_root, batch_size, backoff_ns } => {
            let mut cfg = NodeManagerConfig::new(queue_addr);
            cfg.batch_size = batch_size;
            cfg.backoff_ns = backoff_ns;
            let manager = Arc::new(NodeManager::new(Registry::open(&registry_root)?, cfg));
            let server = ControlServer::bind(bind.as_str(), manager)?;
            info!(addr = %server.local_addr()?, "node manager listening");
            server.run()?;
        }
        Cmd::Publish { name, version, package, registry_root, config, command } => {
            let mut op = NewOperator::new(&name, &version, command);
            op.config = config.into_iter().collect::<BTreeMap<_, _>>();
            let tag = Registry::open(&registry_root)?.publish(&op, &package)?;
            println!("{tag}");
        }
        Cmd::List { registry_root } => {
            for d in Registry::open(&registry_root)?.list()? {
                println!("{}", to_canonical_string(&d)?);
            }
        }
        Cmd::Ctl { control, action } => {
            let client = ControlClient::connect(control.as_str())?;
            let out = match action {
                CtlAction::Deploy { name, version } => to_canonical_string(&client.deploy(&name, version.as_deref())?)?,
                CtlAction::Update { instance_id, version } => to_canonical_string(&client.update(&instance_id, &version)?)?,
                CtlAction::Remove { instance_id } => {
                    client.remove(&instance_id)?;
                    "OK".to_owned()
                }
                CtlAction::Status => to_canonical_string(&client.status()?)?,
            };
            println!("{out}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse().cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("cepless: {e}");
            ExitCode::FAILURE
        }
    }
}
