use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gsdrag::commands;
use gsdrag::config::{EditConfig, Needs};
use gsdrag::{server, CliError, ConfigError};

#[derive(Parser)]
#[command(name = "gsdrag", version, about = "Drag-based editing of 3D Gaussian splatting scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Deform the scene once, without correction or optimization.
    Deform {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the interval pipeline.
    Edit {
        #[arg(long)]
        config: PathBuf,
        /// Continue the session saved in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Render every camera to PNG.
    Render {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long)]
        cameras: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
    },
}

fn load(config: Option<&PathBuf>) -> Result<EditConfig, CliError> {
    Ok(match config {
        Some(path) => EditConfig::load(path)?,
        None => EditConfig::default(),
    })
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Deform { config } => {
            let out = commands::deform(&EditConfig::load(&config)?)?;
            println!("{} gaussians ({} captured) -> {}", out.count, out.captured, out.scene_path.display());
        }
        Command::Edit { config, resume } => {
            let out = commands::edit(&EditConfig::load(&config)?, resume)?;
            println!("ran intervals {:?}; session {:?}; {} gaussians", out.intervals_run, out.status, out.count);
        }
        Command::Render { config, scene, cameras, out } => {
            let mut cfg = load(config.as_ref())?;
            cfg.scene_path = scene.or(cfg.scene_path);
            cfg.cameras_path = cameras.or(cfg.cameras_path);
            if let Some(out) = out {
                cfg.output_dir = out;
            }
            cfg.validate(Needs::RENDER)?;
            let scene = cfg.scene_path.as_ref().ok_or_else(|| ConfigError::new("scene_path", "required"))?;
            let cameras = cfg.cameras_path.as_ref().ok_or_else(|| ConfigError::new("cameras_path", "required"))?;
            let written = commands::render(scene, cameras, &cfg.output_dir, cfg.params.background)?;
            println!("rendered {} views into {}", written.len(), cfg.output_dir.join("renders").display());
        }
        Command::Serve { config, port, host } => {
            let cfg = load(config.as_ref())?;
            let runtime = tokio::runtime::Builder::new_multi_thread()
                .enable_all()
                .build()
                .map_err(|source| CliError::Io { context: "start runtime".into(), source })?;
            runtime.block_on(server::serve(cfg, SocketAddr::new(host, port)))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GSDRAG_LOG", "info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
