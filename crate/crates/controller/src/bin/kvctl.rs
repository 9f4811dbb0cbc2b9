//! Admin CLI for the KV cache controller. Prints JSON.

use std::io::Read;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use kvtier_controller::{ControllerClient, ControllerError, Manager, ManagerConfig};
use kvtier_core::{TierId, TokenId};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "kvctl", about = "Query and steer the KV cache controller")]
struct Cli {
    /// Manager address.
    #[arg(long, short, default_value = "127.0.0.1:7070", global = true)]
    manager: String,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Tokens {
    /// Comma or whitespace separated token ids.
    #[arg(long, conflicts_with = "tokens_file")]
    tokens: Option<String>,
    /// File of token ids; `-` reads stdin.
    #[arg(long)]
    tokens_file: Option<PathBuf>,
}

impl Tokens {
    fn load(&self) -> anyhow::Result<Vec<TokenId>> {
        let text = match (&self.tokens, &self.tokens_file) {
            (Some(t), _) => t.clone(),
            (None, Some(p)) if p.as_os_str() == "-" => {
                let mut s = String::new();
                std::io::stdin().read_to_string(&mut s)?;
                s
            }
            (None, Some(p)) => std::fs::read_to_string(p)?,
            (None, None) => anyhow::bail!("give --tokens or --tokens-file"),
        };
        text.split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<TokenId>()
                    .map_err(|e| anyhow::anyhow!("bad token {s:?}: {e}"))
            })
            .collect()
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Matched prefix tokens per instance.
    Lookup {
        #[command(flatten)]
        tokens: Tokens,
    },
    /// Registered instances with their endpoints.
    Instances,
    /// Endpoints of the given instances.
    QueryIp { ids: Vec<String> },
    /// Move cached chunks of a token list between instances.
    Move {
        #[arg(long)]
        from: String,
        #[arg(long)]
        to: String,
        #[command(flatten)]
        tokens: Tokens,
    },
    Clear {
        #[arg(long)]
        instance: String,
        #[arg(long, default_value = "ram")]
        tier: TierId,
        #[command(flatten)]
        tokens: Tokens,
    },
    Pin {
        #[arg(long)]
        instance: String,
        #[arg(long, default_value = "ram")]
        tier: TierId,
        /// Unpin instead.
        #[arg(long)]
        off: bool,
        #[command(flatten)]
        tokens: Tokens,
    },
    Compress {
        #[arg(long)]
        instance: String,
        #[arg(long, default_value = "ram")]
        tier: TierId,
        #[arg(long, default_value = "q8-scale")]
        codec: String,
        #[command(flatten)]
        tokens: Tokens,
    },
    /// Run a manager in the foreground.
    Serve {
        #[arg(long, default_value = "127.0.0.1:7070")]
        listen: String,
        #[arg(long, default_value_t = kvtier_core::DEFAULT_CHUNK_SIZE)]
        chunk_size: usize,
        #[arg(long, default_value = "sim-8l-4k")]
        model_tag: String,
    },
}

fn run(cli: Cli) -> anyhow::Result<Value> {
    if let Cmd::Serve {
        listen,
        chunk_size,
        model_tag,
    } = &cli.cmd
    {
        let m = Manager::new(ManagerConfig {
            chunk_size: *chunk_size,
            model_tag: model_tag.clone(),
            ..Default::default()
        });
        let server = m.serve(listen.as_str())?;
        eprintln!("manager listening on {}", server.local_addr());
        loop {
            std::thread::park();
        }
    }
    let c = ControllerClient::connect(cli.manager.as_str())?;
    Ok(match cli.cmd {
        Cmd::Lookup { tokens } => json!(c.lookup(&tokens.load()?)?),
        Cmd::Instances => json!(c.instances()?),
        Cmd::QueryIp { ids } => {
            let m: serde_json::Map<String, Value> = c
                .query_ip(&ids)?
                .into_iter()
                .map(|(id, r)| {
                    let v = match r {
                        Ok(ep) => json!(ep),
                        Err(e) => json!({ "error": e.to_string() }),
                    };
                    (id, v)
                })
                .collect();
            Value::Object(m)
        }
        Cmd::Move { from, to, tokens } => {
            json!({ "moved_tokens": c.move_tokens(&from, &to, &tokens.load()?)? })
        }
        Cmd::Clear {
            instance,
            tier,
            tokens,
        } => json!(c.clear(&tokens.load()?, &instance, &tier)?),
        Cmd::Pin {
            instance,
            tier,
            off,
            tokens,
        } => json!(c.pin(&tokens.load()?, &instance, &tier, !off)?),
        Cmd::Compress {
            instance,
            tier,
            codec,
            tokens,
        } => json!(c.compress(&tokens.load()?, &instance, &tier, &codec)?),
        Cmd::Serve { .. } => unreachable!(),
    })
}

fn main() {
    match run(Cli::parse()) {
        Ok(v) => println!("{}", serde_json::to_string_pretty(&v).unwrap()),
        Err(e) => {
            let code = match e.downcast_ref::<ControllerError>() {
                Some(ControllerError::UnknownInstance(_)) => 3,
                _ => 1,
            };
            println!("{}", json!({ "error": e.to_string() }));
            std::process::exit(code);
        }
    }
}
