//! Experiment driver behind the `lleb` binary: `train`, `eval`, `compare`.

pub mod checkpoint;
pub mod config;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::baselines::{laplace_fit, laplace_sample, mcd_posterior_samples, LaplacePosterior};
use crate::data::{make_ood_pair, Dataset};
use crate::error::{Error, Result};
use crate::lleb::{sample_posterior, train_regularized, LLEBModel, SamplerKind};
use crate::metrics::{evaluate_method, EvalReport, PosteriorSamples};
use crate::nets::{train_classifier, ClassifierParams};
use crate::rng::{self, streams};
use crate::tensor::Tensor;

pub use checkpoint::{Checkpoint, Header, MemberHeader, RunHeader, TensorMeta};
pub use config::{ArchProfile, ExperimentConfig, Method};

/// One trained ensemble member.
#[derive(Clone, Debug)]
pub enum TrainedMember {
    /// `default` and `mcd`.
    Classifier(ClassifierParams),
    Laplace(LaplacePosterior),
    Lleb(LLEBModel),
}

/// Seed of ensemble member `m` for run seed `seed`: runs use disjoint
/// blocks `seed * M + m`, so `M = 1` trains with the run seed itself.
pub fn member_seed(seed: u64, ensemble: usize, m: usize) -> u64 {
    seed.wrapping_mul(ensemble as u64).wrapping_add(m as u64)
}

/// Trains one member on `train`; returns the member and its loss traces
/// (classifier stage first, then the flow stage where there is one).
pub fn train_member(
    cfg: &ExperimentConfig,
    train: &Dataset,
    seed: u64,
) -> Result<(TrainedMember, Vec<Vec<f64>>)> {
    let arch = cfg.architecture();
    let pretrain = || train_classifier(&arch, train, &cfg.train_config(), seed);
    Ok(match cfg.method {
        Method::Default | Method::Mcd => {
            let (p, t) = pretrain()?;
            (TrainedMember::Classifier(p), vec![t])
        }
        Method::Lll => {
            let (p, t) = pretrain()?;
            (
                TrainedMember::Laplace(laplace_fit(&p, train, cfg.tau)?),
                vec![t],
            )
        }
        Method::Lleb | Method::FcSampler => {
            let (p, t) = pretrain()?;
            let (model, ft) = two_step_member(cfg, &p, train, seed)?;
            (TrainedMember::Lleb(model), vec![t, ft])
        }
        Method::LlebE2e => {
            let mut model =
                LLEBModel::end_to_end(&arch, SamplerKind::SplineFlow, &cfg.flow_config(), seed)?;
            let t = train_regularized(
                &mut model,
                train,
                &cfg.end_to_end_stage(),
                &cfg.regularization(),
                seed,
            )?;
            (TrainedMember::Lleb(model), vec![t])
        }
    })
}

/// Flow stage of `lleb` / `fc_sampler` on top of a pretrained classifier.
pub fn two_step_member(
    cfg: &ExperimentConfig,
    pretrained: &ClassifierParams,
    train: &Dataset,
    seed: u64,
) -> Result<(LLEBModel, Vec<f64>)> {
    let kind = if cfg.method == Method::FcSampler {
        SamplerKind::FcGenerator
    } else {
        SamplerKind::SplineFlow
    };
    let mut model = LLEBModel::two_step(pretrained, kind, &cfg.flow_config(), seed)?;
    let trace = train_regularized(
        &mut model,
        train,
        &cfg.flow_stage(),
        &cfg.regularization(),
        seed,
    )?;
    Ok((model, trace))
}

impl TrainedMember {
    fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let net = |p: &ClassifierParams| {
            p.tensors
                .iter()
                .enumerate()
                .map(|(i, t)| (format!("net.{i}"), t.clone()))
                .collect::<Vec<_>>()
        };
        match self {
            TrainedMember::Classifier(p) => net(p),
            TrainedMember::Laplace(post) => {
                let mut v = net(&post.params);
                let d = post.precision.nrows();
                // nalgebra is column-major; the precision is symmetric, but
                // store it row-major anyway so the layout is unambiguous.
                let data = (0..d)
                    .flat_map(|i| (0..d).map(move |j| (i, j)))
                    .map(|(i, j)| post.precision[(i, j)]);
                v.push((
                    "laplace.precision".into(),
                    Tensor::new(vec![d, d], data.collect()).expect("square"),
                ));
                v
            }
            TrainedMember::Lleb(m) => {
                let mut v = net(&m.params);
                v.extend(
                    m.sampler
                        .tensors()
                        .into_iter()
                        .enumerate()
                        .map(|(i, t)| (format!("sampler.{i}"), t.clone())),
                );
                v
            }
        }
    }

    fn from_tensors(cfg: &ExperimentConfig, tensors: Vec<Tensor>, seed: u64) -> Result<Self> {
        let arch = cfg.architecture();
        let n_net = arch.param_shapes().len();
        if tensors.len() < n_net {
            return Err(Error::Format(
                "member has fewer tensors than its architecture".into(),
            ));
        }
        let mut tensors = tensors;
        let rest = tensors.split_off(n_net);
        let params = ClassifierParams::from_tensors(&arch, tensors)?;
        match cfg.method {
            Method::Default | Method::Mcd => {
                if !rest.is_empty() {
                    return Err(Error::Format("unexpected extra tensors".into()));
                }
                Ok(TrainedMember::Classifier(params))
            }
            Method::Lll => {
                let [p] = <[Tensor; 1]>::try_from(rest)
                    .map_err(|_| Error::Format("expected one precision tensor".into()))?;
                let d = params.split_dim();
                if p.shape() != [d, d] {
                    return Err(Error::Shape(format!(
                        "precision {:?}, expected [{d}, {d}]",
                        p.shape()
                    )));
                }
                let prec = DMatrix::from_row_slice(d, d, p.data());
                Ok(TrainedMember::Laplace(LaplacePosterior::from_precision(
                    &params, cfg.tau, prec,
                )?))
            }
            Method::Lleb | Method::FcSampler | Method::LlebE2e => {
                let kind = if cfg.method == Method::FcSampler {
                    SamplerKind::FcGenerator
                } else {
                    SamplerKind::SplineFlow
                };
                let mode = if cfg.method == Method::LlebE2e {
                    crate::lleb::Mode::EndToEnd
                } else {
                    crate::lleb::Mode::TwoStep
                };
                let mut sampler = crate::lleb::Sampler::new(
                    kind,
                    params.split_dim(),
                    &cfg.flow_config(),
                    &mut rng::seeded(seed),
                )?;
                let mut slots = sampler.tensors_mut();
                if slots.len() != rest.len()
                    || slots.iter().zip(&rest).any(|(s, t)| s.shape() != t.shape())
                {
                    return Err(Error::Shape(
                        "sampler tensors do not match the flow configuration".into(),
                    ));
                }
                for (s, t) in slots.iter_mut().zip(rest) {
                    **s = t;
                }
                Ok(TrainedMember::Lleb(LLEBModel {
                    mode,
                    params,
                    sampler,
                }))
            }
        }
    }

    /// Posterior draws for evaluation; `seed` fixes every random choice.
    pub fn posterior(&self, method: Method, samples: usize, seed: u64) -> Result<PosteriorSamples> {
        let mut rng = rng::stream(seed, streams::EVAL);
        match (self, method) {
            (TrainedMember::Classifier(p), Method::Mcd) => mcd_posterior_samples(p, samples, seed),
            (TrainedMember::Classifier(p), _) => Ok(PosteriorSamples::point_mass(p)),
            (TrainedMember::Laplace(post), _) => laplace_sample(post, samples, &mut rng),
            (TrainedMember::Lleb(m), _) => sample_posterior(m, samples, &mut rng),
        }
    }
}

/// One trained `(seed, members)` run.
#[derive(Clone, Debug)]
pub struct TrainedRun {
    pub seed: u64,
    pub members: Vec<(u64, TrainedMember)>,
}

pub fn train_runs(
    cfg: &ExperimentConfig,
) -> Result<(Vec<TrainedRun>, BTreeMap<u64, Vec<Vec<Vec<f64>>>>)> {
    let mut runs = Vec::with_capacity(cfg.seeds.len());
    let mut traces = BTreeMap::new();
    for &seed in &cfg.seeds {
        let pair = make_ood_pair(cfg.pair, &cfg.data_config(), seed)?;
        let mut members = Vec::with_capacity(cfg.ensemble);
        let mut run_traces = Vec::with_capacity(cfg.ensemble);
        for m in 0..cfg.ensemble {
            let ms = member_seed(seed, cfg.ensemble, m);
            let (member, t) = train_member(cfg, &pair.train, ms)?;
            members.push((ms, member));
            run_traces.push(t);
        }
        runs.push(TrainedRun { seed, members });
        traces.insert(seed, run_traces);
    }
    Ok((runs, traces))
}

pub fn runs_to_checkpoint(cfg: &ExperimentConfig, runs: &[TrainedRun]) -> Result<Checkpoint> {
    let mut headers = Vec::with_capacity(runs.len());
    let mut tensors = Vec::new();
    for run in runs {
        let mut members = Vec::with_capacity(run.members.len());
        for (seed, member) in &run.members {
            let named = member.named_tensors();
            members.push(MemberHeader {
                seed: *seed,
                tensors: named
                    .iter()
                    .map(|(n, t)| TensorMeta {
                        name: n.clone(),
                        shape: t.shape().to_vec(),
                    })
                    .collect(),
            });
            tensors.extend(named.into_iter().map(|(_, t)| t));
        }
        headers.push(RunHeader {
            seed: run.seed,
            members,
        });
    }
    Ok(Checkpoint {
        header: Header {
            method: cfg.method.name().into(),
            architecture: cfg.architecture(),
            config: cfg.to_toml()?,
            runs: headers,
        },
        tensors,
    })
}

pub fn runs_from_checkpoint(cfg: &ExperimentConfig, ckpt: &Checkpoint) -> Result<Vec<TrainedRun>> {
    if ckpt.header.method != cfg.method.name() {
        return Err(Error::Config(format!(
            "checkpoint holds method {}, config asks for {}",
            ckpt.header.method,
            cfg.method.name()
        )));
    }
    if ckpt.header.architecture != cfg.architecture() {
        return Err(Error::Config(
            "checkpoint architecture differs from the config".into(),
        ));
    }
    let mut tensors = ckpt.tensors.iter().cloned();
    let mut runs = Vec::with_capacity(ckpt.header.runs.len());
    for rh in &ckpt.header.runs {
        let mut members = Vec::with_capacity(rh.members.len());
        for mh in &rh.members {
            let ts: Vec<Tensor> = tensors.by_ref().take(mh.tensors.len()).collect();
            members.push((mh.seed, TrainedMember::from_tensors(cfg, ts, mh.seed)?));
        }
        runs.push(TrainedRun {
            seed: rh.seed,
            members,
        });
    }
    Ok(runs)
}

/// Pools every member's draws and scores them on the run's test/OOD sets.
pub fn evaluate_run(cfg: &ExperimentConfig, run: &TrainedRun) -> Result<EvalReport> {
    let pair = make_ood_pair(cfg.pair, &cfg.data_config(), run.seed)?;
    let parts = run
        .members
        .iter()
        .map(|(seed, m)| m.posterior(cfg.method, cfg.samples, *seed))
        .collect::<Result<Vec<_>>>()?;
    let samples = PosteriorSamples::concat(parts)?;
    evaluate_method(&samples, &pair.test, &pair.ood, &cfg.label(), run.seed)
}

fn with_seed(cfg: &ExperimentConfig, seed: Option<u64>) -> ExperimentConfig {
    let mut cfg = cfg.clone();
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    cfg
}

#[derive(Serialize)]
struct TraceFile<'a> {
    method: &'a str,
    /// seed -> member -> stage -> per-epoch loss
    traces: &'a BTreeMap<u64, Vec<Vec<Vec<f64>>>>,
}

/// Trains every configured seed and writes the checkpoint plus a
/// `<out>.trace.json` sidecar with the loss traces.
pub fn cmd_train(config_path: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = with_seed(&ExperimentConfig::load(config_path)?, seed);
    let (runs, traces) = train_runs(&cfg)?;
    runs_to_checkpoint(&cfg, &runs)?.save(out)?;
    let sidecar = TraceFile {
        method: cfg.method.name(),
        traces: &traces,
    };
    let mut trace_path = out.as_os_str().to_owned();
    trace_path.push(".trace.json");
    std::fs::write(trace_path, serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(())
}

/// Evaluates every run in a checkpoint (or only `seed`) and writes a JSON
/// array with one record per seed.
pub fn cmd_eval(
    checkpoint: &Path,
    config_path: &Path,
    out: &Path,
    seed: Option<u64>,
) -> Result<Vec<EvalReport>> {
    let cfg = ExperimentConfig::load(config_path)?;
    let runs = runs_from_checkpoint(&cfg, &Checkpoint::load(checkpoint)?)?;
    let reports = runs
        .iter()
        .filter(|r| seed.is_none_or(|s| s == r.seed))
        .map(|r| evaluate_run(&cfg, r))
        .collect::<Result<Vec<_>>>()?;
    if reports.is_empty() {
        return Err(Error::InvalidArgument(
            "no run in the checkpoint matches the seed".into(),
        ));
    }
    std::fs::write(out, serde_json::to_vec_pretty(&reports)?)?;
    Ok(reports)
}

/// Mean and standard error `s / sqrt(n)` with the `n - 1` sample deviation.
/// A single value has standard error 0.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub method: String,
    pub seeds: usize,
    pub accuracy: (f64, f64),
    pub ece: (f64, f64),
    /// `None` when the method has no AUROC (a single deterministic model).
    pub auroc: Option<(f64, f64)>,
}

pub fn summarize(reports: &[EvalReport]) -> Result<Vec<Summary>> {
    let mut order: Vec<&str> = Vec::new();
    for r in reports {
        if !order.contains(&r.method.as_str()) {
            order.push(&r.method);
        }
    }
    order
        .into_iter()
        .map(|m| {
            let rs: Vec<&EvalReport> = reports.iter().filter(|r| r.method == m).collect();
            let with_auroc = rs.iter().filter(|r| r.auroc.is_some()).count();
            if with_auroc != 0 && with_auroc != rs.len() {
                return Err(Error::Format(format!(
                    "method {m} mixes reports with and without AUROC"
                )));
            }
            let col = |f: &dyn Fn(&EvalReport) -> f64| {
                mean_stderr(&rs.iter().map(|r| f(r)).collect::<Vec<_>>())
            };
            Ok(Summary {
                method: m.to_string(),
                seeds: rs.len(),
                accuracy: col(&|r| r.accuracy),
                ece: col(&|r| r.ece),
                auroc: (with_auroc > 0).then(|| col(&|r| r.auroc.expect("checked above"))),
            })
        })
        .collect()
}

/// Comma-separated summary with one row per method.
pub fn summary_csv(rows: &[Summary]) -> String {
    let mut s = String::from("method,seeds,acc_mean,acc_se,ece_mean,ece_se,auroc_mean,auroc_se\n");
    for r in rows {
        let (am, ase) = match r.auroc {
            Some((m, e)) => (m.to_string(), e.to_string()),
            None => ("N/A".into(), "N/A".into()),
        };
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{am},{ase}",
            r.method, r.seeds, r.accuracy.0, r.accuracy.1, r.ece.0, r.ece.1
        );
    }
    s
}

/// Aligned plain-text table, values as `mean ± se`.
pub fn summary_table(rows: &[Summary]) -> String {
    let pm = |(m, e): (f64, f64)| format!("{m:.4} ± {e:.4}");
    let body: Vec<[String; 4]> = rows
        .iter()
        .map(|r| {
            [
                r.method.clone(),
                pm(r.accuracy),
                pm(r.ece),
                r.auroc.map_or_else(|| "-".to_string(), pm),
            ]
        })
        .collect();
    let head = ["method", "acc", "ece", "auroc"].map(String::from);
    let width = |i: usize| {
        std::iter::once(&head)
            .chain(&body)
            .map(|row| row[i].chars().count())
            .max()
            .unwrap_or(0)
    };
    let w: Vec<usize> = (0..4).map(width).collect();
    let mut s = String::new();
    for row in std::iter::once(&head).chain(&body) {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{c}{}", " ".repeat(w[i] - c.chars().count())))
            .collect();
        let _ = writeln!(s, "{}", cells.join("  ").trim_end());
    }
    s
}

/// Reads report files and returns `(csv, table)`.
pub fn cmd_compare(paths: &[impl AsRef<Path>]) -> Result<(String, String)> {
    let mut reports = Vec::new();
    for p in paths {
        let rs: Vec<EvalReport> = serde_json::from_slice(&std::fs::read(p.as_ref())?)?;
        reports.extend(rs);
    }
    if reports.is_empty() {
        return Err(Error::InvalidArgument("no reports to compare".into()));
    }
    let rows = summarize(&reports)?;
    Ok((summary_csv(&rows), summary_table(&rows)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stderr_examples() {
        let (m, e) = mean_stderr(&[0.96, 0.98]);
        assert!((m - 0.97).abs() < 1e-12);
        assert!((e - 0.01).abs() < 1e-12);
        assert_eq!(mean_stderr(&[0.5; 5]).1, 0.0);
        assert_eq!(mean_stderr(&[0.7]), (0.7, 0.0));
    }

    #[test]
    fn member_seeds_are_disjoint_across_runs() {
        assert_eq!(member_seed(3, 1, 0), 3);
        let a: Vec<u64> = (0..5).map(|m| member_seed(0, 5, m)).collect();
        let b: Vec<u64> = (0..5).map(|m| member_seed(1, 5, m)).collect();
        assert!(a.iter().all(|s| !b.contains(s)));
    }

    fn report(method: &str, acc: f64, auroc: Option<f64>) -> EvalReport {
        EvalReport {
            method: method.into(),
            seed: 0,
            num_samples: 1,
            accuracy: acc,
            ece: 0.0,
            auroc,
            test_scores: vec![],
            ood_scores: vec![],
        }
    }

    #[test]
    fn mixed_auroc_is_inconsistent() {
        let rs = [report("a", 0.9, Some(0.5)), report("a", 0.9, None)];
        assert!(summarize(&rs).is_err());
    }

    #[test]
    fn table_marks_missing_auroc() {
        let rows =
            summarize(&[report("default", 0.96, None), report("default", 0.98, None)]).unwrap();
        assert!(summary_table(&rows).contains("0.9700 ± 0.0100"));
        assert!(summary_csv(&rows).contains("N/A"));
    }
}
