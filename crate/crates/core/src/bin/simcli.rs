use std::fs::{self, File};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use nlmpc::sim::{apply_config, write_log, write_plot, ScenarioKind, SimSetup};

#[derive(Parser)]
#[command(name = "simcli", about = "Closed-loop MPC simulation of the example scenarios")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one scenario and write log.csv, trajectory.csv and plot.dat.
    Run {
        /// circular, park-forward or park-reverse
        #[arg(long)]
        scenario: String,
        /// Flat key=value parameter file.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(
    scenario: &str,
    config: Option<PathBuf>,
    out: PathBuf,
    steps: Option<usize>,
    seed: u64,
) -> Result<(), String> {
    let kind = ScenarioKind::parse(scenario).ok_or_else(|| format!("unknown scenario {scenario}"))?;
    let mut setup = SimSetup::new(kind);
    if let Some(path) = config {
        let text = fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        apply_config(&text, &mut setup).map_err(|e| format!("{}: {e}", path.display()))?;
    }
    let steps = steps.unwrap_or(kind.default_steps());
    let (traj, log) = setup.run(steps, seed).map_err(|e| e.to_string())?;

    fs::create_dir_all(&out).map_err(|e| format!("{}: {e}", out.display()))?;
    let create = |name: &str| {
        let p = out.join(name);
        File::create(&p).map_err(|e| format!("{}: {e}", p.display()))
    };
    write_log(&log, create("log.csv")?).map_err(|e| e.to_string())?;
    traj.write_csv(create("trajectory.csv")?).map_err(|e| e.to_string())?;
    write_plot(&traj, &log, create("plot.dat")?).map_err(|e| e.to_string())?;

    let faults = log.rows.iter().filter(|r| r.fault.is_some()).count();
    let max_eps = log.rows.iter().map(|r| r.eps).fold(f64::NEG_INFINITY, f64::max);
    let modes: Vec<String> = log.mode_sequence().iter().map(|m| m.code().to_string()).collect();
    let z = &log.final_state;
    println!("steps          {}", log.rows.len());
    println!("median NAS its {}", log.median_iterations());
    println!("max eps        {max_eps:.4}");
    println!("faults         {faults}");
    println!("mode sequence  {}", modes.join(" "));
    println!("final state    x={:.3} y={:.3} phi={:.4} v={:.3}", z[0], z[1], z[2], z[3]);
    println!("output         {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Run {
            scenario,
            config,
            out,
            steps,
            seed,
        } => run(&scenario, config, out, steps, seed),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("simcli: {e}");
            ExitCode::FAILURE
        }
    }
}
