use attrib_core::attribution::{deeplift, gradient, lrp, AttributionConfig, LrpRule, Method};
use attrib_core::forward::OutputSelection;
use attrib_core::model::{LayerKind, ModelGraph};
use attrib_core::oracle::{
    architecture_grid, finite_diff_gradient, naive_forward, naive_lrp, GridBody, GridCase, FD_STEP,
};
use attrib_core::tensor::{Precision, Tensor};
use std::path::PathBuf;
use std::process::ExitCode;

const GRADIENT_TOL: f64 = 1e-6;
const NAIVE_LRP_TOL: f64 = 1e-6;
const DELTA_REL_TOL: f64 = 1e-5;
const CONSERVATION_REL_TOL: f64 = 1e-5;

#[derive(clap::Args)]
pub struct Args {
    /// First seed of the architecture grid.
    #[arg(long = "grid-seed", default_value_t = 0)]
    pub grid_seed: u64,
    /// Number of consecutive grid seeds (32 models each).
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    /// Write every model and its data set to this directory.
    #[arg(long)]
    pub emit: Option<PathBuf>,
}

/// Running error statistics of one comparison.
struct Row {
    name: &'static str,
    tol: f64,
    models: usize,
    sum: f64,
    count: usize,
    max: f64,
    worst: String,
}

impl Row {
    fn new(name: &'static str, tol: f64) -> Self {
        Row {
            name,
            tol,
            models: 0,
            sum: 0.0,
            count: 0,
            max: 0.0,
            worst: String::new(),
        }
    }

    fn add(&mut self, err: f64, label: &str) {
        self.sum += err;
        self.count += 1;
        // NaN must count as a failure
        if err > self.max || err.is_nan() {
            self.max = err;
            self.worst = label.to_string();
        }
    }

    fn pass(&self) -> bool {
        self.models > 0 && self.max <= self.tol
    }
}

/// Selected output values per instance from the loop oracle.
fn oracle_outputs(
    g: &ModelGraph,
    inputs: &[Tensor],
    sel: &OutputSelection,
) -> attrib_core::Result<Vec<Vec<f64>>> {
    (0..inputs[0].shape()[0])
        .map(|b| {
            let rows: Vec<&[f64]> = inputs.iter().map(|x| x.row(b)).collect();
            let t = naive_forward(g, &rows)?;
            Ok(sel
                .entries
                .iter()
                .map(|e| {
                    if sel.use_pre_activation {
                        t.z[e.layer][e.node]
                    } else {
                        t.y[e.layer][e.node]
                    }
                })
                .collect())
        })
        .collect()
}

fn check_case(case: &GridCase, label: &str, rows: &mut [Row; 4]) -> attrib_core::Result<()> {
    let g = &case.graph;
    let sel = OutputSelection::first_output(g, true)?;
    let [grad_row, lrp_row, dl_row, cons_row] = rows;

    let engine = gradient(g, &case.data, &sel, Some(Precision::Double))?;
    let fd = finite_diff_gradient(g, &case.data, &sel, FD_STEP)?;
    for (e, f) in engine.inputs[0].values.data().iter().zip(fd[0].data()) {
        grad_row.add((e - f).abs(), label);
    }
    grad_row.models += 1;

    if case.spec.body == GridBody::Dense {
        let n = sel.len();
        for rule in [
            LrpRule::Simple,
            LrpRule::Epsilon(0.01),
            LrpRule::AlphaBeta(1.0),
            LrpRule::AlphaBeta(2.0),
        ] {
            let cfg =
                AttributionConfig::new(Method::Lrp, sel.clone()).with_rule(LayerKind::Dense, rule);
            let r = lrp(g, &case.data, &cfg)?;
            for b in 0..case.data.batch_size() {
                let row = r.inputs[0].values.row(b);
                for (k, e) in sel.entries.iter().enumerate() {
                    let oracle =
                        naive_lrp(g, case.data.inputs()[0].row(b), e.layer, e.node, rule, true)?;
                    for (i, o) in oracle.iter().enumerate() {
                        lrp_row.add((row[i * n + k] - o).abs(), &format!("{label} {rule}"));
                    }
                }
            }
        }
        lrp_row.models += 1;
    }

    let fx = oracle_outputs(g, case.data.inputs(), &sel)?;
    let zero = vec![Tensor::zeros(
        case.data.inputs()[0].shape(),
        Precision::Double,
    )];
    let f0 = oracle_outputs(g, &zero, &sel)?;
    let r = deeplift(
        g,
        &case.data,
        &AttributionConfig::new(Method::DeepLift, sel.clone()),
    )?;
    for b in 0..r.batch_size() {
        for k in 0..sel.len() {
            let delta = fx[b][k] - f0[b][k];
            dl_row.add((r.total(b, k) - delta).abs() / delta.abs().max(1.0), label);
        }
    }
    dl_row.models += 1;

    if !case.spec.bias {
        let r = lrp(
            g,
            &case.data,
            &AttributionConfig::new(Method::Lrp, sel.clone()),
        )?;
        for b in 0..r.batch_size() {
            for (k, y) in fx[b].iter().enumerate() {
                cons_row.add((r.total(b, k) - y).abs() / y.abs().max(1.0), label);
            }
        }
        cons_row.models += 1;
    }
    Ok(())
}

/// Runs every comparison over the grid and prints one table row per
/// comparison. Exit 0 iff all rows are within tolerance.
pub fn run(args: &Args) -> ExitCode {
    let mut rows = [
        Row::new("gradient vs finite differences (abs)", GRADIENT_TOL),
        Row::new("LRP vs loop oracle, dense (abs)", NAIVE_LRP_TOL),
        Row::new("DeepLift summation to delta (rel)", DELTA_REL_TOL),
        Row::new("LRP conservation, no bias (rel)", CONSERVATION_REL_TOL),
    ];
    for seed in args.grid_seed..args.grid_seed + args.seeds {
        for case in architecture_grid(seed) {
            let label = format!("{} seed {seed}", case.name);
            if let Some(dir) = &args.emit {
                let dir = dir.join(format!("seed{seed}"));
                if let Err(e) = std::fs::create_dir_all(&dir)
                    .map_err(attrib_core::Error::from)
                    .and_then(|_| case.write_files(&dir))
                {
                    eprintln!("error: cannot write {label}: {e}");
                    return ExitCode::from(2);
                }
            }
            if let Err(e) = check_case(&case, &label, &mut rows) {
                eprintln!("error: {label}: {e}");
                return ExitCode::FAILURE;
            }
        }
    }

    println!(
        "{:<40} {:>6} {:>10} {:>10} {:>8}  status",
        "comparison", "models", "MAE", "max", "tol"
    );
    let mut ok = true;
    for r in &rows {
        let mae = if r.count == 0 {
            0.0
        } else {
            r.sum / r.count as f64
        };
        let status = if r.pass() { "PASS" } else { "FAIL" };
        ok &= r.pass();
        print!(
            "{:<40} {:>6} {:>10.2e} {:>10.2e} {:>8.0e}  {status}",
            r.name, r.models, mae, r.max, r.tol
        );
        if !r.pass() && !r.worst.is_empty() {
            print!(" (worst: {})", r.worst);
        }
        println!();
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
