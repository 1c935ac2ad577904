//! Orchestration of one configured run: load, execute, write artifacts.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use oraclebench_core::experiments::active::{run_active_learning, ALResult};
use oraclebench_core::experiments::scaling::run_scaling;
use oraclebench_core::experiments::shift::{
    match_sigma_to_kl, mc_distribution_kl, run_shift_suite, ShiftConfig, BASELINE,
};
use oraclebench_core::experiments::softlabels::{mode_name, run_softlabels};
use oraclebench_core::experiments::CellStatus;
use oraclebench_core::numcore::{RngStream, RNG_SCHEME};
use oraclebench_core::oracle::{ClassPrior, FlowOracle, LabeledSample, Oracle};
use oraclebench_core::validate::{histogram, validate_oracle};
use oraclebench_core::FORMAT_VERSION;

use crate::config::{load, Kind, Params, RealData, RunConfig, ShiftParams, TrainOracleParams};
use crate::output::{csv_bytes, json_bytes, sha256_hex, Manifest, OutDir};
use crate::plot::{emit_plot, Cell, Labels, PlotKind, Table};
use crate::CliError;

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub config: PathBuf,
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub seed_offset: u64,
}

#[derive(Debug)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub cells: Vec<CellStatus>,
}

/// Output directory: flag, then config `out`, then `$ORACLEBENCH_OUT/<config
/// stem>`, then `oraclebench-out/<config stem>`.
fn out_dir(opts: &RunOptions, cfg: &RunConfig<Params>) -> PathBuf {
    if let Some(o) = &opts.out {
        return o.clone();
    }
    if let Some(o) = &cfg.out {
        return o.clone();
    }
    let stem = opts
        .config
        .file_stem()
        .map(|s| s.to_os_string())
        .unwrap_or_else(|| "run".into());
    let root = std::env::var_os("ORACLEBENCH_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("oraclebench-out"));
    root.join(stem)
}

fn rt(cell: &str) -> impl Fn(oraclebench_core::Error) -> CliError + '_ {
    move |e| CliError::runtime(cell, e.to_string())
}

fn svg(out: &mut OutDir, name: &str, table: &Table, kind: PlotKind, labels: Labels) -> Result<(), CliError> {
    let doc = emit_plot(table, kind, &labels).map_err(rt("plot"))?;
    out.write(name, doc.as_bytes())
}

/// Execute the run configured at `opts.config` for subcommand `kind`.
pub fn run(kind: Kind, opts: &RunOptions) -> Result<RunSummary, CliError> {
    let start = Instant::now();
    let loaded = load(&opts.config, kind)?;
    let mut cfg = loaded.config.clone();
    for s in &mut cfg.seeds {
        *s = s.wrapping_add(opts.seed_offset);
    }
    let jobs = opts.jobs.or(cfg.jobs).unwrap_or_else(rayon::current_num_threads);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::runtime("setup", e.to_string()))?;
    let out_root = out_dir(opts, &cfg);
    let mut out = OutDir::new(out_root.clone());

    let cells = pool.install(|| execute(&mut cfg, opts.seed_offset, &mut out))?;

    let manifest = Manifest {
        tool: "oraclebench",
        tool_version: env!("CARGO_PKG_VERSION"),
        kind: kind.name().into(),
        config_path: loaded.path.display().to_string(),
        config_sha256: sha256_hex(&loaded.raw),
        seeds: cfg.seeds.clone(),
        seed_offset: opts.seed_offset,
        jobs,
        rng_scheme: RNG_SCHEME,
        format_version: FORMAT_VERSION,
        cells: cells.clone(),
        files: out.files.clone(),
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    out.write("manifest.json", &json_bytes(&manifest)?)?;
    if let Some(failed) = cells.iter().find(|c| !c.ok) {
        return Err(CliError::runtime(
            &failed.id,
            failed.error.clone().unwrap_or_else(|| "failed".into()),
        ));
    }
    Ok(RunSummary {
        out_dir: out_root,
        cells,
    })
}

fn matched_configs(oracle: &Oracle, p: &ShiftParams) -> Result<Vec<ShiftConfig>, CliError> {
    let base = ShiftConfig {
        name: BASELINE.into(),
        pi: oracle.prior().clone(),
        sigma: 0.0,
        n_train: p.protocol.n_train,
        seeds: vec![],
    };
    p.matched
        .iter()
        .map(|m| {
            let cell = format!("matched/{}", m.name);
            let of = p
                .configs
                .iter()
                .find(|c| c.name == m.match_kl_of)
                .expect("checked at load");
            let mut rng = RngStream::new(p.protocol.kl_seed, 0);
            let target = mc_distribution_kl(of, &base, oracle, p.protocol.n_mc, &mut rng).map_err(rt(&cell))?;
            let (sigma, _) =
                match_sigma_to_kl(oracle, target.kl, p.protocol.n_mc, p.protocol.kl_seed).map_err(rt(&cell))?;
            Ok(ShiftConfig {
                name: m.name.clone(),
                pi: oracle.prior().clone(),
                sigma,
                n_train: m.n_train.unwrap_or(of.n_train),
                seeds: m.seeds.clone(),
            })
        })
        .collect()
}

fn offset_seeds(seeds: &mut Vec<u64>, top: &[u64], offset: u64) {
    if seeds.is_empty() {
        *seeds = top.to_vec();
    } else {
        for s in seeds.iter_mut() {
            *s = s.wrapping_add(offset);
        }
    }
}

fn execute(cfg: &mut RunConfig<Params>, offset: u64, out: &mut OutDir) -> Result<Vec<CellStatus>, CliError> {
    let oracle = cfg.oracle.load()?;
    let seeds = cfg.seeds.clone();
    match &mut cfg.params {
        Params::Scaling(grid) => {
            offset_seeds(&mut grid.seeds, &seeds, offset);
            let r = run_scaling(&oracle, grid).map_err(rt("setup"))?;
            out.write("scaling.csv", &csv_bytes(&r.rows)?)?;
            out.write("fit.json", &json_bytes(&r.fits)?)?;
            let mut t = Table::new(PlotKind::LogLog.schema());
            for row in &r.rows {
                t.push_series(&row.variant, row.n as f64, row.epistemic);
            }
            svg(
                out,
                "loglog.svg",
                &t,
                PlotKind::LogLog,
                Labels::new("Epistemic KL vs N", "N", "epistemic KL (nats)"),
            )?;
            Ok(r.cells)
        }
        Params::Softlabels(c) => {
            offset_seeds(&mut c.seeds, &seeds, offset);
            let r = run_softlabels(&oracle, c).map_err(rt("setup"))?;
            out.write("softlabels.csv", &csv_bytes(&r.rows)?)?;
            let mut t = Table::new(PlotKind::Curves.schema());
            for row in &r.rows {
                t.push_series(
                    &format!("{} seed {}", mode_name(row.mode), row.seed),
                    row.n as f64,
                    row.epistemic,
                );
            }
            svg(
                out,
                "softlabels.svg",
                &t,
                PlotKind::Curves,
                Labels::new("Soft vs hard labels", "N", "epistemic KL (nats)"),
            )?;
            Ok(r.cells)
        }
        Params::Shift(p) => {
            let matched = matched_configs(&oracle, p)?;
            p.configs.extend(matched);
            for c in &mut p.configs {
                offset_seeds(&mut c.seeds, &seeds, offset);
            }
            let r = run_shift_suite(&oracle, &p.configs, &p.protocol).map_err(rt("setup"))?;
            out.write("shift.csv", &csv_bytes(&r.rows)?)?;
            out.write("shift_summary.csv", &csv_bytes(&r.results)?)?;
            out.write("regression.json", &json_bytes(&r.regression)?)?;
            let mut t = Table::new(PlotKind::Scatter.schema());
            for res in &r.results {
                let series = if res.sigma > 0.0 { "input noise" } else { "prior shift" };
                t.push_series(series, res.kl_mc, res.delta_acc);
            }
            svg(
                out,
                "shift.svg",
                &t,
                PlotKind::Scatter,
                Labels::new("Accuracy change vs KL", "KL (nats)", "delta accuracy (pp)"),
            )?;
            Ok(r.cells)
        }
        Params::Active(c) => {
            offset_seeds(&mut c.seeds, &seeds, offset);
            let r = run_active_learning(&oracle, c).map_err(rt("setup"))?;
            write_active(out, &r)?;
            Ok(r.cells)
        }
        Params::TrainOracle(p) => train_oracle(&oracle, p, seeds[0], out),
        Params::Validate(p) => {
            let real = match &p.real {
                RealData::Csv(path) => read_labeled_csv(path)?,
                RealData::Sample { oracle: src, n } => {
                    let o = src.load()?;
                    o.sample_labeled(*n, &mut RngStream::new(seeds[0], 0xDA7A))
                        .map_err(rt("setup"))?
                }
            };
            let mut checks = p.checks.clone();
            checks.self_validation.seed = seeds[0];
            let (report, distances) = validate_oracle(&oracle, &real, &checks, &mut RngStream::new(seeds[0], 0x9E4))
                .map_err(rt("validate"))?;
            out.write("validation.json", &json_bytes(&report)?)?;
            let hist = histogram(&distances, p.histogram_bins).map_err(rt("validate"))?;
            #[derive(Serialize)]
            struct Bin {
                distance: f64,
                count: usize,
            }
            let bins: Vec<Bin> = hist.iter().map(|&(distance, count)| Bin { distance, count }).collect();
            out.write("nn_hist.csv", &csv_bytes(&bins)?)?;
            let mut t = Table::new(PlotKind::Histogram.schema());
            for (d, c) in hist {
                t.rows.push(vec![Cell::Num(d), Cell::Num(c as f64)]);
            }
            svg(
                out,
                "nn_hist.svg",
                &t,
                PlotKind::Histogram,
                Labels::new("Nearest training distance of generated samples", "distance", "count"),
            )?;
            Ok(vec![CellStatus {
                id: "validate".into(),
                ok: true,
                error: None,
            }])
        }
    }
}

fn write_active(out: &mut OutDir, r: &ALResult) -> Result<(), CliError> {
    out.write("active.csv", &csv_bytes(&r.rows)?)?;
    out.write("efficiency.csv", &csv_bytes(&r.efficiency)?)?;
    let mut t = Table::new(PlotKind::Curves.schema());
    let mut seen: Vec<_> = r.rows.iter().map(|x| x.strategy).collect();
    seen.dedup();
    seen.sort_by_key(|s| s.name());
    seen.dedup();
    // mean accuracy over seeds per strategy and label count
    for st in seen {
        let mut labels: Vec<usize> = r.rows.iter().filter(|x| x.strategy == st).map(|x| x.labels).collect();
        labels.sort_unstable();
        labels.dedup();
        for l in labels {
            let acc: Vec<f64> = r
                .rows
                .iter()
                .filter(|x| x.strategy == st && x.labels == l)
                .map(|x| x.accuracy)
                .collect();
            t.push_series(st.name(), l as f64, acc.iter().sum::<f64>() / acc.len() as f64);
        }
    }
    svg(
        out,
        "active.svg",
        &t,
        PlotKind::Curves,
        Labels::new("Active learning", "labels", "test accuracy"),
    )
}

/// Feature columns then an integer label column, with a header row.
pub fn read_labeled_csv(path: &Path) -> Result<Vec<LabeledSample>, CliError> {
    let bad = |m: String| CliError::runtime("setup", format!("{}: {m}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        if rec.len() < 2 {
            return Err(bad(format!("row {}: need features and a label", i + 1)));
        }
        let x = rec
            .iter()
            .take(rec.len() - 1)
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| bad(format!("row {}: {e}", i + 1)))?;
        let y = rec[rec.len() - 1]
            .trim()
            .parse::<usize>()
            .map_err(|e| bad(format!("row {}: label: {e}", i + 1)))?;
        out.push(LabeledSample::new(x, y));
    }
    if out.is_empty() {
        return Err(bad("no rows".into()));
    }
    Ok(out)
}

fn labeled_csv(data: &[LabeledSample]) -> Vec<u8> {
    let d = data.first().map(|s| s.x.len()).unwrap_or(0);
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let mut header: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
    header.push("y".into());
    w.write_record(&header).expect("in-memory write");
    let mut buf = ryu::Buffer::new();
    for s in data {
        let mut rec: Vec<String> = s.x.iter().map(|v| buf.format(*v).to_string()).collect();
        rec.push(s.y.to_string());
        w.write_record(&rec).expect("in-memory write");
    }
    w.into_inner().expect("in-memory write")
}

fn train_oracle(
    source: &Oracle,
    p: &TrainOracleParams,
    seed: u64,
    out: &mut OutDir,
) -> Result<Vec<CellStatus>, CliError> {
    let data = match &p.data_csv {
        Some(path) => read_labeled_csv(path)?,
        None => {
            let mut rng = RngStream::new(seed, 0xDA7A);
            let mut v = Vec::new();
            for k in 0..source.num_classes() {
                let xs = source.sample_class(k, p.n_per_class, &mut rng).map_err(rt("setup"))?;
                v.extend(xs.into_iter().map(|x| LabeledSample::new(x, k)));
            }
            v
        }
    };
    let k = data.iter().map(|s| s.y).max().unwrap_or(0) + 1;
    let dim = data[0].x.len();
    let counts: Vec<f64> = (0..k)
        .map(|c| data.iter().filter(|s| s.y == c).count() as f64)
        .collect();
    let prior = ClassPrior::from_weights(&counts).map_err(rt("setup"))?;
    let mut flow = FlowOracle::new(prior, dim, p.flow, &mut RngStream::new(seed, 0xF10)).map_err(rt("setup"))?;

    #[derive(Serialize)]
    struct NllRow {
        class: usize,
        epoch: usize,
        nll: f64,
    }
    let mut rows = Vec::new();
    let mut cells = Vec::new();
    let mut table = Table::new(PlotKind::Loss.schema());
    for c in 0..k {
        let xs: Vec<Vec<f64>> = data.iter().filter(|s| s.y == c).map(|s| s.x.clone()).collect();
        let mut tc = p.train;
        tc.seed = seed.wrapping_add(c as u64);
        let id = format!("class={c}");
        let res = flow.train_class(c, &xs, &tc);
        cells.push(CellStatus {
            id: id.clone(),
            ok: res.is_ok(),
            error: res.as_ref().err().map(|e| e.to_string()),
        });
        let trace = res.map_err(|e| CliError::runtime(&id, e.to_string()))?;
        let curve = std::iter::once(trace.initial).chain(trace.checkpoints.iter().copied());
        for (epoch, nll) in curve.enumerate() {
            rows.push(NllRow { class: c, epoch, nll });
            table.push_series(&format!("class {c}"), epoch as f64, nll);
        }
    }
    let frozen = Oracle::Flow(flow.freeze());
    out.write("oracle.json", frozen.to_json().map_err(rt("output"))?.as_bytes())?;
    out.write("train_data.csv", &labeled_csv(&data))?;
    out.write("nll.csv", &csv_bytes(&rows)?)?;
    svg(
        out,
        "loss.svg",
        &table,
        PlotKind::Loss,
        Labels::new("Flow training NLL", "epoch", "NLL (nats/sample)"),
    )?;
    Ok(cells)
}
