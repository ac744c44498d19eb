//! Command-line front end: convergence studies of the smooth benchmark,
//! the Barry–Mercer point-source benchmark, and a pressure-oscillation
//! check, all configurable through flags or a flat `key=value` file.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Parser, Subcommand};

use biot_hdg::assembly::MaterialParams;
use biot_hdg::fe_spaces::Variant;
use biot_hdg::scenarios::{
    emit_csv, emit_line_csv, emit_vtk, format_csv, run_barry_mercer, run_convergence_study,
    run_oscillation_check, BarryMercerConfig, ManufacturedSolution,
};

#[derive(Parser)]
#[command(
    name = "biot-hdg",
    version,
    about = "Divergence-conforming HDG solver for quasi-static Biot consolidation"
)]
struct Cli {
    /// Flat key=value configuration file (# starts a comment); command-line
    /// flags take precedence over file values.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the smooth-solution convergence study and write a CSV table.
    Converge {
        /// Polynomial degree (pressure degree k; displacement uses k+1).
        #[arg(long)]
        k: Option<usize>,
        /// Number of mesh levels, starting at h = 1/4 and halving.
        #[arg(long)]
        levels: Option<usize>,
        /// BDF order of the time integrator.
        #[arg(long)]
        bdf: Option<usize>,
        /// Conformity variant: `standard` or `relaxed`.
        #[arg(long)]
        variant: Option<String>,
        /// Stabilization constant τ₀ (the schemes use τ = τ₀k²).
        #[arg(long)]
        tau0: Option<f64>,
        /// Output CSV path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the Barry–Mercer benchmark, writing VTK fields and diagonal
    /// pressure profiles at the requested normalized times.
    BarryMercer {
        /// Polynomial degree.
        #[arg(long)]
        k: Option<usize>,
        /// Mesh resolution (h = 1/n).
        #[arg(long)]
        n: Option<usize>,
        /// BDF order of the time integrator.
        #[arg(long)]
        bdf: Option<usize>,
        /// Comma-separated normalized snapshot times t̂ = βt.
        #[arg(long)]
        snapshots: Option<String>,
        /// Prefix for the emitted VTK/CSV files.
        #[arg(long)]
        out_prefix: Option<PathBuf>,
    },
    /// One backward-Euler step of the low-permeability source problem and a
    /// check of the diagonal pressure profile for spurious oscillations.
    OscillationCheck {
        /// Mesh resolution (h = 1/n).
        #[arg(long)]
        n: Option<usize>,
        /// Permeability.
        #[arg(long)]
        kappa: Option<f64>,
        /// Time-step size.
        #[arg(long)]
        dt: Option<f64>,
        /// Optional CSV path for the diagonal pressure profile.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Values from a flat `key=value` file, used wherever a flag is absent.
struct FileConfig(HashMap<String, String>);

impl FileConfig {
    fn empty() -> FileConfig {
        FileConfig(HashMap::new())
    }

    fn load(path: &Path) -> Result<FileConfig, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        let mut map = HashMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("{}:{}: expected key=value", path.display(), idx + 1))?;
            map.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(FileConfig(map))
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, String>
    where
        T::Err: Display,
    {
        match self.0.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|e| format!("config key {key}={raw}: {e}")),
        }
    }
}

/// Flag value, else file value, else the built-in default.
fn resolve<T: FromStr>(
    flag: Option<T>,
    file: &FileConfig,
    key: &str,
    default: T,
) -> Result<T, String>
where
    T::Err: Display,
{
    match flag {
        Some(v) => Ok(v),
        None => Ok(file.get(key)?.unwrap_or(default)),
    }
}

fn parse_variant(name: &str) -> Result<Variant, String> {
    match name {
        "standard" => Ok(Variant::Standard),
        "relaxed" => Ok(Variant::Relaxed),
        other => Err(format!("unknown variant {other:?}: expected standard or relaxed")),
    }
}

fn parse_snapshots(list: &str) -> Result<Vec<f64>, String> {
    list.split(',')
        .map(|tok| {
            let tok = tok.trim();
            tok.parse::<f64>().map_err(|e| format!("snapshot time {tok:?}: {e}"))
        })
        .collect()
}

/// File-name label for a normalized time: two decimals, dot spelled out.
fn time_label(that: f64) -> String {
    format!("{that:.2}").replace('.', "p")
}

fn run_converge(
    file: &FileConfig,
    k: Option<usize>,
    levels: Option<usize>,
    bdf: Option<usize>,
    variant: Option<String>,
    tau0: Option<f64>,
    out: Option<PathBuf>,
) -> Result<(), String> {
    let k = resolve(k, file, "k", 1)?;
    let levels = resolve(levels, file, "levels", 3)?;
    let bdf = resolve(bdf, file, "bdf", 3)?;
    let variant_name = resolve(variant, file, "variant", "standard".to_string())?;
    let tau0 = resolve(tau0, file, "tau0", 10.0)?;
    let out = resolve(out, file, "out", PathBuf::from("convergence.csv"))?;

    if !(1..=3).contains(&k) {
        return Err(format!("k = {k} out of range 1..=3"));
    }
    if levels == 0 {
        return Err("levels must be at least 1".into());
    }
    let variant = parse_variant(&variant_name)?;

    let params = MaterialParams { tau0, ..ManufacturedSolution::standard().params };
    let ms = ManufacturedSolution::with_params(params);
    let ns: Vec<usize> = (0..levels).map(|i| 4usize << i).collect();
    eprintln!(
        "convergence study: k={k} variant={variant_name} bdf={bdf} tau0={tau0} \
         meshes 1/{}..1/{}",
        ns[0],
        ns[ns.len() - 1]
    );
    let report = run_convergence_study(k, &ns, bdf, variant, &ms).map_err(|e| e.to_string())?;
    print!("{}", format_csv(&report));
    emit_csv(&report, &out).map_err(|e| e.to_string())?;
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn run_bm(
    file: &FileConfig,
    k: Option<usize>,
    n: Option<usize>,
    bdf: Option<usize>,
    snapshots: Option<String>,
    out_prefix: Option<PathBuf>,
) -> Result<(), String> {
    let k = resolve(k, file, "k", 1)?;
    let n = resolve(n, file, "n", 64)?;
    let bdf = resolve(bdf, file, "bdf", 2)?;
    let snapshot_list = resolve(
        snapshots,
        file,
        "snapshots",
        format!("{},{}", PI / 2.0, 3.0 * PI / 2.0),
    )?;
    let prefix = resolve(out_prefix, file, "out_prefix", PathBuf::from("barry_mercer"))?;

    let times = parse_snapshots(&snapshot_list)?;
    let cfg = BarryMercerConfig::default();
    eprintln!(
        "barry-mercer: k={k} n={n} bdf={bdf} beta={:.3} dt={:.6e} snapshots at t̂={snapshot_list}",
        cfg.beta(),
        cfg.dt()
    );
    let run = run_barry_mercer(&cfg, k, n, bdf, &times).map_err(|e| e.to_string())?;
    for snap in &run.snapshots {
        let label = time_label(snap.normalized_time);
        let vtk = prefix.with_file_name(format!(
            "{}_t{label}.vtk",
            prefix.file_name().map(|s| s.to_string_lossy()).unwrap_or_default()
        ));
        let vtk_def = prefix.with_file_name(format!(
            "{}_t{label}_deformed.vtk",
            prefix.file_name().map(|s| s.to_string_lossy()).unwrap_or_default()
        ));
        let diag = prefix.with_file_name(format!(
            "{}_t{label}_diagonal.csv",
            prefix.file_name().map(|s| s.to_string_lossy()).unwrap_or_default()
        ));
        emit_vtk(&run.mesh, &run.space, &snap.state, &vtk, false).map_err(|e| e.to_string())?;
        emit_vtk(&run.mesh, &run.space, &snap.state, &vtk_def, true).map_err(|e| e.to_string())?;
        emit_line_csv(&snap.diagonal, &diag).map_err(|e| e.to_string())?;
        println!(
            "t̂ = {:6.3} (step {:4}): p(x0) = {:+.6e}; wrote {}, {}, {}",
            snap.normalized_time,
            snap.step,
            snap.pressure_at_source,
            vtk.display(),
            vtk_def.display(),
            diag.display()
        );
    }
    Ok(())
}

fn run_oscillation(
    file: &FileConfig,
    n: Option<usize>,
    kappa: Option<f64>,
    dt: Option<f64>,
    out: Option<PathBuf>,
) -> Result<bool, String> {
    let n = resolve(n, file, "n", 64)?;
    let kappa = resolve(kappa, file, "kappa", 1e-6)?;
    let dt = resolve(dt, file, "dt", 1e-4)?;
    eprintln!("oscillation check: n={n} kappa={kappa:e} dt={dt:e}");
    let report = run_oscillation_check(n, kappa, dt).map_err(|e| e.to_string())?;
    if let Some(path) = out.or(file.get("out")?) {
        emit_line_csv(&report.diagonal, &path).map_err(|e| e.to_string())?;
        eprintln!("wrote {}", path.display());
    }
    let ok = report.passes(0.05);
    println!(
        "diagonal pressure after one backward-Euler step: min = {:+.6e}, max = {:+.6e} ({})",
        report.min_pressure,
        report.max_pressure,
        if ok { "no significant undershoot" } else { "undershoot beyond 5% of peak" }
    );
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let file = match &cli.config {
        Some(path) => match FileConfig::load(path) {
            Ok(f) => f,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::FAILURE;
            }
        },
        None => FileConfig::empty(),
    };
    let result = match cli.command {
        Command::Converge { k, levels, bdf, variant, tau0, out } => {
            run_converge(&file, k, levels, bdf, variant, tau0, out)
        }
        Command::BarryMercer { k, n, bdf, snapshots, out_prefix } => {
            run_bm(&file, k, n, bdf, snapshots, out_prefix)
        }
        Command::OscillationCheck { n, kappa, dt, out } => {
            match run_oscillation(&file, n, kappa, dt, out) {
                Ok(true) => Ok(()),
                Ok(false) => Err("oscillation check failed".into()),
                Err(e) => Err(e),
            }
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
