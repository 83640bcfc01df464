//! `arcp <task> --config <file> [--set key=value]...`
//!
//! Exit codes: 0 success, 1 invalid configuration or arguments, 2 runtime
//! failure (including a failing gradient check).

mod config;
mod tasks;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;
use serde_json::json;

use config::{RunConfig, Task};

#[derive(Parser, Debug)]
#[command(name = "arcp", version, about = "Trajectory prediction, traffic-light recognition and crossing prediction")]
struct Cli {
    /// Task to run.
    #[arg(value_enum, required_unless_present = "print_schema")]
    task: Option<Task>,
    /// JSON configuration merged over the selected preset.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one field by dotted path, e.g. `train.epochs=5`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Print the resolved configuration and exit without running.
    #[arg(long)]
    dry_run: bool,
    /// Print the JSON schema of the configuration file and exit.
    #[arg(long, exclusive = true)]
    print_schema: bool,
}

/// Schema of a configuration file: the resolved configuration with every
/// field optional, since files are merged over a preset.
fn file_schema() -> serde_json::Value {
    fn strip(v: &mut serde_json::Value) {
        match v {
            serde_json::Value::Object(m) => {
                m.remove("required");
                m.values_mut().for_each(strip);
            }
            serde_json::Value::Array(a) => a.iter_mut().for_each(strip),
            _ => {}
        }
    }
    let mut v = serde_json::to_value(schemars::schema_for!(RunConfig)).expect("schema serialises");
    strip(&mut v);
    v
}

const VALIDATION: u8 = 1;
const RUNTIME: u8 = 2;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { VALIDATION } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if cli.print_schema {
        println!("{}", serde_json::to_string_pretty(&file_schema()).expect("schema serialises"));
        return ExitCode::SUCCESS;
    }
    let task = cli.task.expect("clap enforces a task");
    let cfg = match config::resolve(task, cli.config.as_deref(), &cli.set) {
        Ok(c) => c,
        Err(msg) => {
            eprintln!("error: invalid configuration: {msg}");
            return ExitCode::from(VALIDATION);
        }
    };
    if cli.dry_run {
        println!("{}", serde_json::to_string_pretty(&cfg).expect("config serialises"));
        return ExitCode::SUCCESS;
    }
    let start = Instant::now();
    let outcome = match tasks::run(&cfg) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {} failed: {e}", config::task_name(task));
            return ExitCode::from(RUNTIME);
        }
    };
    let run = json!({
        "task": task,
        "seed": cfg.seed,
        "passed": outcome.passed,
        "config": cfg,
        "metrics": outcome.metrics,
        "artifacts": outcome.artifacts,
    });
    let path = cfg.out_dir.join("run.json");
    let text = serde_json::to_string_pretty(&run).expect("run record serialises") + "\n";
    if let Err(e) = fs::write(&path, text) {
        eprintln!("error: cannot write {}: {e}", path.display());
        return ExitCode::from(RUNTIME);
    }
    eprintln!("{} done in {:.1}s, wrote {}", config::task_name(task), start.elapsed().as_secs_f64(), path.display());
    if outcome.passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(RUNTIME)
    }
}
