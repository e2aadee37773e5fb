use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitCode};

use clap::{Parser, Subcommand};

use dpsgd_lab::accountant::epsilon_for;
use dpsgd_lab::data::DATA_DIR_ENV;
use dpsgd_lab::exp::{self, ExperimentConfig};
use dpsgd_lab::Error;

const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

/// Differentially private training laboratory.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    /// Directory holding mnist/, fashion-mnist/ and cifar-10-batches-bin/.
    #[arg(long, global = true, env = DATA_DIR_ENV, default_value = "data")]
    data_dir: PathBuf,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Execute one experiment config.
    Run {
        config: PathBuf,
        /// Cap data at 1000 samples and GA runs at one generation.
        #[arg(long)]
        smoke: bool,
        /// Override the config's output directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Expand a config template over a grid and run every point.
    Sweep {
        template: PathBuf,
        /// `dotted.key=v1,v2,...`; repeat for more axes.
        #[arg(long = "grid")]
        grid: Vec<String>,
        #[arg(long, default_value_t = 1)]
        replicates: usize,
        /// Concurrent child processes.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        smoke: bool,
        /// Print the expanded runs without executing them.
        #[arg(long)]
        dry_run: bool,
    },
    /// Privacy cost of a single subsampled Gaussian phase.
    Accountant {
        #[arg(long)]
        q: f64,
        #[arg(long)]
        sigma: f64,
        #[arg(long)]
        steps: u64,
        #[arg(long, default_value_t = 1e-5)]
        delta: f64,
    },
    /// Tabulate final accuracy and epsilon of finished training runs.
    Summarize {
        dirs: Vec<PathBuf>,
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn fail(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(if e.is_validation() { EXIT_VALIDATION } else { EXIT_RUNTIME })
}

fn load_config(path: &Path) -> Result<ExperimentConfig, ExitCode> {
    ExperimentConfig::load(path).map_err(|e| {
        eprintln!("error: {}: {e}", path.display());
        ExitCode::from(EXIT_VALIDATION)
    })
}

fn run_cmd(data_dir: &Path, config: &Path, smoke: bool, output: Option<PathBuf>) -> ExitCode {
    let mut cfg = match load_config(config) {
        Ok(c) => c,
        Err(code) => return code,
    };
    if smoke {
        cfg.apply_smoke();
    }
    if let Some(o) = output {
        cfg.output = o;
    }
    match exp::run(&cfg, data_dir) {
        Ok(out) => {
            println!("{}", out.display());
            ExitCode::SUCCESS
        }
        Err(e) => fail(&e),
    }
}

fn sweep_cmd(
    data_dir: &Path,
    template: &Path,
    grid: &[String],
    replicates: usize,
    jobs: usize,
    smoke: bool,
    dry_run: bool,
) -> ExitCode {
    let text = match std::fs::read_to_string(template) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {}: {e}", template.display());
            return ExitCode::from(EXIT_VALIDATION);
        }
    };
    let axes = match grid.iter().map(|g| exp::parse_grid_axis(g)).collect::<Result<Vec<_>, _>>() {
        Ok(a) => a,
        Err(e) => return fail(&e),
    };
    let runs = match exp::expand_sweep(&text, &axes, replicates) {
        Ok(r) => r,
        Err(e) => return fail(&e),
    };
    if dry_run {
        for r in &runs {
            println!("{}\t{}", r.label, r.config.output.display());
        }
        return ExitCode::SUCCESS;
    }
    let exe = match std::env::current_exe() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot locate own executable: {e}");
            return ExitCode::from(EXIT_RUNTIME);
        }
    };
    let mut pending = runs.into_iter();
    let mut active: Vec<(String, Child)> = Vec::new();
    let mut failed = Vec::new();
    loop {
        while active.len() < jobs.max(1) {
            let Some(r) = pending.next() else { break };
            let out = &r.config.output;
            let cfg_path = out.join("config.toml");
            if let Err(e) = std::fs::create_dir_all(out).and_then(|_| std::fs::write(&cfg_path, r.config.to_toml())) {
                eprintln!("error: {}: {e}", out.display());
                failed.push(r.label);
                continue;
            }
            let mut cmd = Command::new(&exe);
            cmd.arg("--data-dir").arg(data_dir).arg("run").arg(&cfg_path);
            if smoke {
                cmd.arg("--smoke");
            }
            match cmd.spawn() {
                Ok(child) => active.push((r.label, child)),
                Err(e) => {
                    eprintln!("error: spawning {}: {e}", r.label);
                    failed.push(r.label);
                }
            }
        }
        if active.is_empty() {
            break;
        }
        let (label, mut child) = active.remove(0);
        match child.wait() {
            Ok(s) if s.success() => eprintln!("done {label}"),
            _ => {
                eprintln!("FAILED {label}");
                failed.push(label);
            }
        }
    }
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        eprintln!("{} run(s) failed: {}", failed.len(), failed.join(" "));
        ExitCode::from(EXIT_RUNTIME)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match cli.command {
        Cmd::Run { config, smoke, output } => run_cmd(&cli.data_dir, &config, smoke, output),
        Cmd::Sweep {
            template,
            grid,
            replicates,
            jobs,
            smoke,
            dry_run,
        } => sweep_cmd(&cli.data_dir, &template, &grid, replicates, jobs, smoke, dry_run),
        Cmd::Accountant { q, sigma, steps, delta } => match epsilon_for(q, sigma, steps, delta) {
            Ok((eps, order)) => {
                println!("epsilon={eps} order={order} delta={delta}");
                ExitCode::SUCCESS
            }
            Err(e) => fail(&e),
        },
        Cmd::Summarize { dirs, out } => {
            let (rows, missing) = exp::summarize(&dirs);
            for m in &missing {
                eprintln!("missing or incomplete run: {}", m.display());
            }
            let result = match &out {
                Some(p) => std::fs::File::create(p)
                    .map_err(|e| Error::Runtime(format!("{}: {e}", p.display())))
                    .and_then(|f| exp::write_summary(&rows, f)),
                None => exp::write_summary(&rows, std::io::stdout().lock()),
            };
            match result {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => fail(&e),
            }
        }
    }
}
