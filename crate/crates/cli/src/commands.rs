use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use prorep::boot::{bootstrap, Band, BootstrapResult};
use prorep::data::write_panel;
use prorep::oracle::{gformula_risk, DiscreteDgm};
use prorep::pipeline::PipelineError;
use prorep::regime::Variant;
use prorep::sim::{sample_panel, seeded_dgm, Generator, SimConfig};
use prorep::weights::FittedModel;
use prorep::{load_panel, run_pipeline, PanelDataset, PipelineConfig, PipelineResult};
use serde_json::{json, Value};

use crate::config::{resolve_regimes, GeneratorSection, RunConfig};
use crate::error::{Failure, Kind, ResultExt};

fn pipeline_kind(e: &PipelineError) -> Kind {
    match e {
        PipelineError::Data(_) => Kind::Data,
        e if e.is_input_error() => Kind::Config,
        _ => Kind::Numeric,
    }
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, Failure> {
    let path = dir.join(name);
    File::create(&path)
        .map(BufWriter::new)
        .with_context_kind(Kind::Data, || format!("creating {}", path.display()))
}

fn finish(mut w: BufWriter<File>) -> Result<(), Failure> {
    w.flush().kind(Kind::Data)
}

pub fn prepare_out(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).with_context_kind(Kind::Data, || format!("creating {}", dir.display()))
}

pub fn load_data(cfg: &RunConfig) -> Result<PanelDataset, Failure> {
    let data = cfg.data()?;
    let path = cfg.resolve(&data.path);
    let file = File::open(&path).with_context_kind(Kind::Data, || format!("opening {}", path.display()))?;
    load_panel(std::io::BufReader::new(file), &data.schema)
        .with_context_kind(Kind::Data, || format!("loading {}", path.display()))
}

pub fn estimate(panel: &PanelDataset, pipeline: &PipelineConfig) -> Result<PipelineResult, Failure> {
    run_pipeline(panel, pipeline).map_err(|e| Failure::new(pipeline_kind(&e), e))
}

fn model_summary(model: &FittedModel) -> Value {
    match model {
        FittedModel::Constant(v) => json!({ "constant": v }),
        FittedModel::Logistic { fit, .. } => json!({
            "columns": fit.columns,
            "coefficients": fit.coefficients.to_vec(),
            "iterations": fit.iterations,
            "max_score": fit.max_score,
        }),
    }
}

fn summary(panel: &PanelDataset, pipeline: &PipelineConfig, result: &PipelineResult) -> Value {
    let horizon = result.curves.first().map_or(0, |c| c.risk.len());
    let at_k: BTreeMap<&str, f64> = result
        .curves
        .iter()
        .map(|c| (c.label.as_str(), c.risk[horizon - 1]))
        .collect();
    let mut differences = BTreeMap::new();
    for (i, a) in result.curves.iter().enumerate() {
        for b in &result.curves[i + 1..] {
            differences.insert(
                format!("{}-{}", b.label, a.label),
                b.risk[horizon - 1] - a.risk[horizon - 1],
            );
        }
    }
    json!({
        "subjects": panel.n(),
        "rows": panel.total_rows(),
        "horizon": horizon,
        "regimes": pipeline.regimes,
        "variant": pipeline.variant,
        "risk_at_horizon": at_k,
        "differences_at_horizon": differences,
        "max_weight": result.weights.max_weight(),
        "capped_rows": result.msm.capped,
        "msm": {
            "columns": result.msm.fit.columns,
            "coefficients": result.msm.fit.coefficients.to_vec(),
            "rows": result.msm.rows,
        },
        "treatment_models": {
            "b": model_summary(&result.models.b),
            "h": model_summary(&result.models.h),
            "c": result.models.c.as_ref().map(model_summary),
        },
    })
}

fn write_tables(
    out: &Path,
    result: &PipelineResult,
    bands: Option<&BootstrapResult>,
) -> Result<(), Failure> {
    let mut w = create(out, "risk.csv")?;
    writeln!(w, "regime,k,risk,lo,hi,n_eff").kind(Kind::Data)?;
    for (z, c) in result.curves.iter().enumerate() {
        for (k, r) in c.risk.iter().enumerate() {
            let (lo, hi) = match bands {
                Some(b) => (b.bands[z].lo[k].to_string(), b.bands[z].hi[k].to_string()),
                None => (String::new(), String::new()),
            };
            writeln!(w, "{},{},{r},{lo},{hi},{}", c.label, k + 1, c.n_eff[k]).kind(Kind::Data)?;
        }
    }
    finish(w)?;

    let mut w = create(out, "utilization.csv")?;
    writeln!(w, "regime,k,util_b,util_h").kind(Kind::Data)?;
    for u in &result.utilization {
        for (k, (b, h)) in u.util_b.iter().zip(&u.util_h).enumerate() {
            writeln!(w, "{},{},{b},{h}", u.label, k + 1).kind(Kind::Data)?;
        }
    }
    finish(w)?;

    let mut w = create(out, "diagnostics.csv")?;
    result.weights.write_diagnostics(&mut w).kind(Kind::Data)?;
    finish(w)
}

fn write_json(out: &Path, name: &str, value: &Value) -> Result<(), Failure> {
    let mut w = create(out, name)?;
    let text = serde_json::to_string_pretty(value).kind(Kind::Data)?;
    writeln!(w, "{text}").kind(Kind::Data)?;
    finish(w)
}

pub fn fit(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let pipeline = cfg.pipeline()?;
    let panel = load_data(cfg)?;
    let result = estimate(&panel, &pipeline)?;
    prepare_out(out)?;
    write_tables(out, &result, None)?;
    write_json(out, "summary.json", &summary(&panel, &pipeline, &result))
}

fn write_bands(out: &Path, boot: &BootstrapResult) -> Result<(), Failure> {
    let mut w = create(out, "bands.csv")?;
    writeln!(w, "label,kind,k,lo,hi").kind(Kind::Data)?;
    let rows = |w: &mut BufWriter<File>, kind: &str, bands: &[Band]| -> Result<(), Failure> {
        for b in bands {
            for (k, (lo, hi)) in b.lo.iter().zip(&b.hi).enumerate() {
                writeln!(w, "{},{kind},{},{lo},{hi}", b.label, k + 1).kind(Kind::Data)?;
            }
        }
        Ok(())
    };
    rows(&mut w, "risk", &boot.bands)?;
    rows(&mut w, "difference", &boot.differences)?;
    finish(w)
}

pub fn run_bootstrap(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let pipeline = cfg.pipeline()?;
    let panel = load_data(cfg)?;
    let result = estimate(&panel, &pipeline)?;
    let seed = cfg.bootstrap.seed.unwrap_or(cfg.seed);
    let boot = bootstrap(&panel, &pipeline, cfg.bootstrap.replicates, seed).kind(Kind::Numeric)?;
    prepare_out(out)?;
    write_tables(out, &result, Some(&boot))?;
    write_bands(out, &boot)?;
    let mut doc = summary(&panel, &pipeline, &result);
    doc["bootstrap"] = json!({
        "replicates": boot.replicates,
        "failures": boot.failures,
        "seed": seed,
    });
    write_json(out, "summary.json", &doc)
}

pub fn load_dgm(cfg: &RunConfig, path: &Path) -> Result<DiscreteDgm<f64>, Failure> {
    let path = cfg.resolve(path);
    let text = fs::read_to_string(&path).with_context_kind(Kind::Data, || format!("reading {}", path.display()))?;
    DiscreteDgm::from_json(&text, cfg.oracle_bound)
        .with_context_kind(Kind::Validation, || format!("invalid DGM {}", path.display()))
}

pub fn simulate(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let section = cfg
        .simulate
        .as_ref()
        .ok_or_else(|| Failure::msg(Kind::Config, "missing [simulate] section"))?;
    let generator = match &section.generator {
        GeneratorSection::Transplant(g) => Generator::Transplant(g.clone()),
        GeneratorSection::Dgm(path) => Generator::Dgm(load_dgm(cfg, path)?),
        GeneratorSection::Seeded {
            seed,
            levels,
            censoring,
        } => Generator::Dgm(
            seeded_dgm(*seed, section.horizon, *levels, *censoring, &Default::default())
                .kind(Kind::Config)?,
        ),
    };
    let sim = SimConfig {
        n: section.n,
        horizon: section.horizon,
        seed: cfg.seed,
        generator,
    };
    let panel = sample_panel(&sim).kind(Kind::Config)?;
    prepare_out(out)?;
    let w = create(out, "panel.csv")?;
    write_panel(&panel, w).kind(Kind::Data)?;

    if let Generator::Dgm(dgm) = &sim.generator {
        fs::write(out.join("dgm.json"), dgm.to_json() + "\n").kind(Kind::Data)?;
    }
    // exact counterfactual risks when the generator is a finite DGM
    if let (Generator::Dgm(dgm), Some(model)) = (&sim.generator, &cfg.model) {
        let variant = model.variant;
        let regimes = resolve_regimes(&model.regimes)?;
        let mut w = create(out, "truth.csv")?;
        writeln!(w, "regime,k,risk").kind(Kind::Data)?;
        for regime in &regimes {
            let run = gformula_risk(dgm, regime, section.horizon, variant, cfg.oracle_bound)
                .kind(Kind::Numeric)?;
            for (k, r) in run.risk.iter().enumerate() {
                writeln!(w, "{},{},{r}", regime.label, k + 1).kind(Kind::Data)?;
            }
        }
        finish(w)?;
    }
    let doc = json!({
        "subjects": panel.n(),
        "rows": panel.total_rows(),
        "horizon": section.horizon,
        "seed": cfg.seed,
        "variant": cfg.model.as_ref().map_or(Variant::Generalized, |m| m.variant),
    });
    write_json(out, "summary.json", &doc)
}

pub fn out_dir(cfg: &RunConfig, flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| cfg.out.as_ref().map(|p| cfg.resolve(p)))
        .unwrap_or_else(|| PathBuf::from("prorep-out"))
}
