use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;
use sketchsmith::{router, Config};
use sketchsmith_core::HardwareManifest;

#[derive(Parser)]
#[command(
    name = "sketchsmith",
    version,
    about = "Generate, repair, upload and tune Arduino sketches"
)]
struct Cli {
    /// Path to the TOML config file.
    #[arg(long, global = true, default_value = "sketchsmith.toml")]
    config: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP API.
    Serve {
        /// Overrides `server.bind` from the config.
        #[arg(long)]
        bind: Option<String>,
    },
    /// Create a session and send it one instruction.
    Chat {
        /// JSON hardware manifest.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        instruction: String,
    },
    /// Compile the current sketch of a session.
    Compile {
        #[arg(long)]
        session: String,
    },
    /// Upload the current sketch of a session.
    Upload {
        #[arg(long)]
        session: String,
        #[arg(long)]
        port: String,
    },
    /// List or set tunable constants.
    Knobs {
        #[command(subcommand)]
        action: KnobAction,
    },
    /// List serial ports seen by the toolchain.
    Ports,
    /// Rebuild a session from its event log and print it.
    Replay {
        #[arg(long)]
        session: String,
    },
}

#[derive(Subcommand)]
enum KnobAction {
    List {
        #[arg(long)]
        session: String,
    },
    Set {
        #[arg(long)]
        session: String,
        knob: String,
        value: f64,
    },
}

fn print_json(value: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn serve(config: &Config, bind: Option<String>) -> Result<()> {
    let service = Arc::new(config.open_service()?);
    let bind = bind.unwrap_or_else(|| config.server.bind.clone());
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&bind)
            .await
            .with_context(|| format!("binding {bind}"))?;
        tracing::info!("listening on {}", listener.local_addr()?);
        axum::serve(listener, router(service)).await?;
        Ok(())
    })
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let config = Config::load(&cli.config)?;
    if let Command::Serve { bind } = cli.command {
        return serve(&config, bind);
    }

    let service = config.open_service()?;
    match cli.command {
        Command::Serve { .. } => unreachable!(),
        Command::Chat {
            manifest,
            instruction,
        } => {
            let text = std::fs::read_to_string(&manifest)
                .with_context(|| format!("reading {}", manifest.display()))?;
            let manifest: HardwareManifest =
                serde_json::from_str(&text).context("manifest JSON")?;
            let session = service.create_session(manifest)?;
            eprintln!("session {}", session.id);
            let session = service.post_instruction(&session.id, &instruction)?;
            match session.current_version() {
                Some(v) => println!("{}", v.sketch.source),
                None => {
                    let reply = session
                        .conversation
                        .last()
                        .map(|m| m.content.as_str())
                        .unwrap_or_default();
                    bail!(
                        "no sketch in the reply (status {}): {reply}",
                        session.status().as_str()
                    );
                }
            }
        }
        Command::Compile { session } => {
            let s = service.compile_current(&session)?;
            if let Some(result) = &s.loop_state.last_result {
                eprint!("{}", result.raw_output);
            }
            println!("{}", s.status().as_str());
        }
        Command::Upload { session, port } => {
            let s = service.upload_current(&session, &port)?;
            let upload = s.last_upload.context("no upload result")?;
            eprint!("{}", upload.raw_output);
            if !upload.success {
                bail!("upload to {port} failed");
            }
            println!("uploaded to {port}");
        }
        Command::Knobs {
            action: KnobAction::List { session },
        } => print_json(&service.get_knobs(&session)?)?,
        Command::Knobs {
            action:
                KnobAction::Set {
                    session,
                    knob,
                    value,
                },
        } => {
            let s = service.set_knob(&session, &knob, value)?;
            let v = s.current_version().context("no sketch")?;
            eprintln!("{knob} = {value} ({})", v.version);
            println!("{}", v.sketch.source);
        }
        Command::Ports => print_json(&service.list_ports()?)?,
        Command::Replay { session } => print_json(&service.replay(&session)?)?,
    }
    Ok(())
}
