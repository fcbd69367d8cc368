//! Subcommand implementations: thin wrappers that wire the library modules
//! together and leave a reproducible trail (config echo + manifest) in every
//! output directory.

use std::path::{Path, PathBuf};

use factordiff::analytic::{
    sample_divergence, simulate_reverse_moments, AnalyticModel, GaussianComponent,
};
use factordiff::composition::{
    cross_model_recombine, decompose, recombine, reconstruct, RecombinationPlan, RecombineMode,
    Selection, Source,
};
use factordiff::datasets::{
    gen_global_dataset, gen_sprite_dataset, load_dataset, load_png, save_dataset, save_png,
    FactorDataset, Split,
};
use factordiff::metrics::{disentanglement_report, mse_psnr};
use factordiff::networks::ModelHandle;
use factordiff::sampling::{
    sample, CompositionSpec, CompositionTerm, Reduction, SamplerConfig, SamplerKind,
};
use factordiff::schedule::NoiseSchedule;
use factordiff::training::{train, write_loss_csv};
use factordiff::{Error, Result};
use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::RunConfig;
use crate::manifest::{prepare_out_dir, write_text, RunManifest};

pub fn cmd_make_dataset(cfg: &RunConfig, out: &Path, force: bool) -> Result<()> {
    let seed = cfg.seed()?;
    prepare_out_dir(out, force)?;
    let mut manifest = RunManifest::start("make-dataset", seed);

    let ds = match cfg.dataset.kind.as_str() {
        "sprites" => gen_sprite_dataset(&cfg.dataset.sprite_config()?, cfg.dataset.n, seed)?,
        "global" => gen_global_dataset(&cfg.dataset.global_config()?, cfg.dataset.n, seed)?,
        other => {
            return Err(Error::Config(format!(
                "unknown dataset kind {other:?} (expected \"sprites\" or \"global\")"
            )))
        }
    };
    let dir = out.join("dataset");
    save_dataset(&ds, &dir)?;

    let n_test = ds.split_indices(Split::Test).len();
    manifest.output("dataset");
    manifest.field(
        "dataset",
        json!({
            "kind": cfg.dataset.kind,
            "images": ds.len(),
            "test_images": n_test,
            "resolution": ds.resolution(),
            "factors": ds.factor_names(),
        }),
    );
    manifest.finish(out, cfg)
}

pub fn cmd_train(cfg: &RunConfig, dataset: &Path, out: &Path, force: bool) -> Result<()> {
    let seed = cfg.seed()?;
    prepare_out_dir(out, force)?;
    let mut manifest = RunManifest::start("train", seed);

    let ds = load_dataset(dataset)?;
    let train_idx = ds.split_indices(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::Argument(format!(
            "dataset {} has no training images",
            dataset.display()
        )));
    }
    let images = ds.images().select(Axis(0), &train_idx);

    let schedule = cfg.schedule.build()?;
    let mut model = ModelHandle::new(
        cfg.model.encoder_config(),
        cfg.model.denoiser_config()?,
        schedule,
        ds.resolution(),
        3,
        seed,
    )?;
    let train_cfg = cfg.train.build(model.predict(), seed)?;

    let ckpt = out.join("model.ckpt");
    let losses = train(&mut model, &images, &train_cfg, Some(&ckpt))?;
    write_loss_csv(&out.join("loss.csv"), &losses)?;

    manifest.output("model.ckpt");
    manifest.output("loss.csv");
    manifest.field(
        "training",
        json!({
            "images": train_idx.len(),
            "steps": losses.len(),
            "final_loss": losses.last().copied(),
            "model_fingerprint": format!("{:016x}", model.fingerprint()),
            "parameters": model.num_params(),
        }),
    );
    manifest.finish(out, cfg)
}

pub fn cmd_decompose(
    cfg: &RunConfig,
    model_path: &Path,
    image_path: &Path,
    out: &Path,
    force: bool,
) -> Result<()> {
    let seed = cfg.seed()?;
    prepare_out_dir(out, force)?;
    let mut manifest = RunManifest::start("decompose", seed);

    let model = ModelHandle::load_checkpoint(model_path)?;
    let image = load_image_for(&model, image_path)?;
    let sampler = cfg.sampler.build(seed)?;

    let parts = decompose(&model, image.view(), &sampler)?;
    for (k, part) in parts.iter().enumerate() {
        let name = format!("component_{k:02}.png");
        save_png(&out.join(&name), part.view())?;
        manifest.output(name);
    }
    manifest.field(
        "model",
        json!({
            "path": model_path.display().to_string(),
            "fingerprint": format!("{:016x}", model.fingerprint()),
            "k": model.k(),
        }),
    );
    manifest.finish(out, cfg)
}

pub fn cmd_reconstruct(
    cfg: &RunConfig,
    model_path: &Path,
    image_path: &Path,
    out: &Path,
    force: bool,
) -> Result<()> {
    let seed = cfg.seed()?;
    prepare_out_dir(out, force)?;
    let mut manifest = RunManifest::start("reconstruct", seed);

    let model = ModelHandle::load_checkpoint(model_path)?;
    let image = load_image_for(&model, image_path)?;
    let sampler = cfg.sampler.build(seed)?;

    let recon = reconstruct(&model, image.view(), &sampler)?;
    save_png(&out.join("reconstruction.png"), recon.view())?;
    let (mse, psnr) = mse_psnr(image.view(), recon.view())?;
    write_text(
        &out.join("metrics.csv"),
        &format!("metric,value\nmse,{mse}\npsnr,{psnr}\n"),
    )?;

    manifest.output("reconstruction.png");
    manifest.output("metrics.csv");
    manifest.field("metrics", json!({ "mse": mse, "psnr": psnr }));
    manifest.finish(out, cfg)
}

/// On-disk recombination plan.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanFile {
    mode: String,
    #[serde(default)]
    pick: Vec<PlanPick>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanPick {
    source: usize,
    component: usize,
    #[serde(default = "weight_one")]
    weight: f32,
}

fn weight_one() -> f32 {
    1.0
}

fn load_plan(path: &Path) -> Result<(RecombineMode, Vec<PlanPick>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let plan: PlanFile = toml::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {}", path.display(), flatten(&e))))?;
    let mode = RecombineMode::parse(&plan.mode)?;
    if mode == RecombineMode::Additive && !plan.pick.is_empty() {
        return Err(Error::Config(
            "additive mode uses every component of every source; remove the [[pick]] entries"
                .into(),
        ));
    }
    Ok((mode, plan.pick))
}

fn flatten(e: &toml::de::Error) -> String {
    crate::config::flatten_toml_error(e)
}

fn build_plan<'a>(
    mode: RecombineMode,
    picks: &[PlanPick],
    sources: Vec<Source<'a>>,
) -> Result<RecombinationPlan<'a>> {
    match mode {
        RecombineMode::Additive => RecombinationPlan::additive(sources),
        RecombineMode::Select => RecombinationPlan::select(
            sources,
            picks
                .iter()
                .map(|p| Selection {
                    source: p.source,
                    component: p.component,
                    weight: p.weight,
                })
                .collect(),
        ),
    }
}

fn plan_json(plan: &RecombinationPlan, image_paths: &[PathBuf]) -> serde_json::Value {
    let picks: Vec<_> = plan
        .selection()
        .iter()
        .map(|s| json!({ "source": s.source, "component": s.component, "weight": s.weight }))
        .collect();
    let sources: Vec<_> = plan
        .sources()
        .iter()
        .enumerate()
        .map(|(i, s)| {
            json!({
                "image": image_paths[i].display().to_string(),
                "model_fingerprint": format!("{:016x}", s.model().fingerprint()),
                "k": s.model().k(),
            })
        })
        .collect();
    json!({ "mode": plan.mode().as_str(), "picks": picks, "sources": sources })
}

pub fn cmd_recombine(
    cfg: &RunConfig,
    model_path: &Path,
    image_paths: &[PathBuf],
    plan_path: &Path,
    out: &Path,
    force: bool,
) -> Result<()> {
    let seed = cfg.seed()?;
    prepare_out_dir(out, force)?;
    let mut manifest = RunManifest::start("recombine", seed);

    let model = ModelHandle::load_checkpoint(model_path)?;
    let (mode, picks) = load_plan(plan_path)?;
    let sources = image_paths
        .iter()
        .map(|p| Source::new(&model, load_image_for(&model, p)?))
        .collect::<Result<Vec<_>>>()?;
    let plan = build_plan(mode, &picks, sources)?;
    let sampler = cfg.sampler.build(seed)?;

    let image = recombine(&plan, &sampler)?;
    save_png(&out.join("recombined.png"), image.view())?;

    manifest.output("recombined.png");
    manifest.field("plan", plan_json(&plan, image_paths));
    manifest.finish(out, cfg)
}

pub fn cmd_cross(
    cfg: &RunConfig,
    model_paths: &[PathBuf],
    image_paths: &[PathBuf],
    plan_path: &Path,
    reduction: &str,
    out: &Path,
    force: bool,
) -> Result<()> {
    let seed = cfg.seed()?;
    if model_paths.len() != image_paths.len() {
        return Err(Error::Argument(format!(
            "{} models for {} images; pass one --model per --image",
            model_paths.len(),
            image_paths.len()
        )));
    }
    prepare_out_dir(out, force)?;
    let mut manifest = RunManifest::start("cross", seed);

    let models = model_paths
        .iter()
        .map(|p| ModelHandle::load_checkpoint(p))
        .collect::<Result<Vec<_>>>()?;
    let (mode, picks) = load_plan(plan_path)?;
    let sources = models
        .iter()
        .zip(image_paths)
        .map(|(m, p)| Source::new(m, load_image_for(m, p)?))
        .collect::<Result<Vec<_>>>()?;
    let plan = build_plan(mode, &picks, sources)?;
    let reduction = Reduction::parse(reduction)?;
    let sampler = cfg.sampler.build(seed)?;

    let image = cross_model_recombine(&plan, &sampler, reduction)?;
    save_png(&out.join("cross.png"), image.view())?;

    manifest.output("cross.png");
    let mut plan_doc = plan_json(&plan, image_paths);
    plan_doc["reduction"] = json!(reduction.as_str());
    manifest.field("plan", plan_doc);
    manifest.finish(out, cfg)
}

pub fn cmd_evaluate(
    cfg: &RunConfig,
    model_path: &Path,
    dataset: &Path,
    out: &Path,
    force: bool,
) -> Result<()> {
    let seed = cfg.seed()?;
    prepare_out_dir(out, force)?;
    let mut manifest = RunManifest::start("evaluate", seed);

    let model = ModelHandle::load_checkpoint(model_path)?;
    let ds = load_dataset(dataset)?;
    if ds.resolution() != model.resolution() {
        return Err(Error::Argument(format!(
            "dataset resolution {} does not match the model's {}",
            ds.resolution(),
            model.resolution()
        )));
    }
    let test_idx = ds.split_indices(Split::Test);
    if test_idx.is_empty() {
        return Err(Error::Argument(format!(
            "dataset {} has no test images",
            dataset.display()
        )));
    }

    // Disentanglement of the encoder latents against ground-truth factors,
    // with a shuffled-pairing baseline from the same latents.
    let latents = encode_split(&model, &ds, &test_idx)?;
    let factors = ds.factors().select(Axis(0), &test_idx);
    let report = disentanglement_report(latents.view(), factors.view())?;
    let shuffled = shuffle_rows(&latents, seed ^ 0x9e37_79b9);
    let shuffled_report = disentanglement_report(shuffled.view(), factors.view())?;

    // Pixel metrics over reconstructed held-out images.
    let sampler = cfg.sampler.build(seed)?;
    let n_recon = cfg.eval.images.min(test_idx.len());
    let mut recon_rows = String::from("index,mse,psnr\n");
    let mut mse_sum = 0.0;
    let mut psnr_sum = 0.0;
    for &idx in test_idx.iter().take(n_recon) {
        let original = ds.image(idx);
        let recon = reconstruct(&model, original, &sampler)?;
        let (mse, psnr) = mse_psnr(original, recon.view())?;
        recon_rows.push_str(&format!("{idx},{mse},{psnr}\n"));
        mse_sum += mse;
        psnr_sum += psnr;
    }
    let recon_mse = mse_sum / n_recon.max(1) as f64;
    let recon_psnr = psnr_sum / n_recon.max(1) as f64;

    write_text(&out.join("recon.csv"), &recon_rows)?;
    let mut summary = String::from("metric,value\n");
    summary.push_str(&format!("mig,{}\n", report.mig));
    summary.push_str(&format!("mcc,{}\n", report.mcc));
    summary.push_str(&format!("mig_shuffled,{}\n", shuffled_report.mig));
    summary.push_str(&format!("mcc_shuffled,{}\n", shuffled_report.mcc));
    summary.push_str(&format!("recon_mse,{recon_mse}\n"));
    summary.push_str(&format!("recon_psnr,{recon_psnr}\n"));
    summary.push_str(&format!("test_images,{}\n", test_idx.len()));
    summary.push_str(&format!("reconstructed_images,{n_recon}\n"));
    write_text(&out.join("summary.csv"), &summary)?;

    manifest.output("recon.csv");
    manifest.output("summary.csv");
    manifest.field(
        "metrics",
        json!({
            "mig": report.mig,
            "mcc": report.mcc,
            "mig_shuffled": shuffled_report.mig,
            "mcc_shuffled": shuffled_report.mcc,
            "recon_mse": recon_mse,
            "recon_psnr": recon_psnr,
            "warnings": report.warnings,
        }),
    );
    manifest.finish(out, cfg)
}

fn encode_split(model: &ModelHandle, ds: &FactorDataset, idx: &[usize]) -> Result<Array2<f32>> {
    let width = model.k() * model.d();
    let mut out = Array2::zeros((idx.len(), width));
    for (row, &i) in idx.iter().enumerate() {
        let latents = model.encode(ds.image(i))?;
        for k in 0..latents.k() {
            let z = latents.component(k)?;
            for (j, &v) in z.iter().enumerate() {
                out[[row, k * latents.d() + j]] = v;
            }
        }
    }
    Ok(out)
}

fn shuffle_rows(latents: &Array2<f32>, seed: u64) -> Array2<f32> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..latents.nrows()).collect();
    order.shuffle(&mut ChaCha12Rng::seed_from_u64(seed));
    latents.select(Axis(0), &order)
}

/// Fixed two-component testbed for the sampler-vs-oracle checks. The
/// components sit well inside the samplers' [-1, 1] clamp so the clamp
/// (which the moment oracle does not model) stays inactive.
fn oracle_components() -> (GaussianComponent, GaussianComponent) {
    let a = GaussianComponent::new(
        DVector::from_column_slice(&[0.25, -0.10]),
        DMatrix::from_row_slice(2, 2, &[0.030, 0.010, 0.010, 0.040]),
    )
    .expect("fixed SPD covariance");
    let b = GaussianComponent::new(
        DVector::from_column_slice(&[-0.20, 0.15]),
        DMatrix::from_row_slice(2, 2, &[0.050, -0.015, -0.015, 0.025]),
    )
    .expect("fixed SPD covariance");
    (a, b)
}

struct OracleCheck {
    name: &'static str,
    mean_err: f64,
    cov_err: f64,
}

const ORACLE_MEAN_TOL: f64 = 0.05;
const ORACLE_COV_TOL: f64 = 0.1;
const ORACLE_SAMPLES: usize = 10_000;
const ORACLE_T_MAX: usize = 200;

impl OracleCheck {
    fn passed(&self) -> bool {
        self.mean_err < ORACLE_MEAN_TOL && self.cov_err < ORACLE_COV_TOL
    }

    fn line(&self) -> String {
        format!(
            "{}: {} (mean_err {:.4} vs {ORACLE_MEAN_TOL}, cov_err {:.4} vs {ORACLE_COV_TOL})",
            self.name,
            if self.passed() { "pass" } else { "FAIL" },
            self.mean_err,
            self.cov_err,
        )
    }
}

fn draw_population(
    spec: &CompositionSpec,
    cfg: &SamplerConfig,
    rng: &mut ChaCha12Rng,
) -> Result<Array2<f64>> {
    let (c, _, _) = spec.image_shape();
    let mut samples = Array2::zeros((ORACLE_SAMPLES, c));
    for i in 0..ORACLE_SAMPLES {
        let x = sample(spec, cfg, spec.image_shape(), rng)?;
        for j in 0..c {
            samples[[i, j]] = x[[j, 0, 0]] as f64;
        }
    }
    Ok(samples)
}

fn moments_component(
    components: &[(GaussianComponent, f64)],
    cfg: &SamplerConfig,
    schedule: &NoiseSchedule,
) -> Result<GaussianComponent> {
    let (mean, cov) = simulate_reverse_moments(components, Reduction::Mean, cfg, schedule)?;
    GaussianComponent::new(mean, cov)
}

/// Closed-form end-to-end checks: sampled populations from exact Gaussian
/// noise predictions must match the step-wise moment recursion, and the
/// single-component sampler must land on its own data distribution.
pub fn cmd_oracle(cfg: &RunConfig, out: Option<&Path>, force: bool) -> Result<i32> {
    let seed = cfg.seed()?;
    let schedule = NoiseSchedule::squared_cosine(ORACLE_T_MAX)?;
    let (comp_a, comp_b) = oracle_components();
    let model_a = AnalyticModel::new(comp_a.clone(), schedule.clone());
    let model_b = AnalyticModel::new(comp_b.clone(), schedule.clone());
    let mut rng = ChaCha12Rng::seed_from_u64(seed);

    let ddim = SamplerConfig {
        kind: SamplerKind::Ddim,
        num_steps: 100,
        gamma: 1.0,
        eta: 0.0,
        seed,
    };
    let ancestral = SamplerConfig { kind: SamplerKind::AncestralAlg2, ..ddim.clone() };

    let mut checks = Vec::new();

    // Single component, subsequence sampler.
    let single_spec = CompositionSpec::new(
        vec![CompositionTerm::new(&model_a, vec![], 1.0)],
        Reduction::Mean,
    )?;
    let single = draw_population(&single_spec, &ddim, &mut rng)?;
    let single_oracle = moments_component(&[(comp_a.clone(), 1.0)], &ddim, &schedule)?;
    let (mean_err, cov_err) = sample_divergence(single.view(), &single_oracle)?;
    checks.push(OracleCheck { name: "single_ddim_vs_step_oracle", mean_err, cov_err });
    let (mean_err, cov_err) = sample_divergence(single.view(), &comp_a)?;
    checks.push(OracleCheck { name: "single_ddim_vs_data_distribution", mean_err, cov_err });

    // Two components composed with mean reduction, both samplers.
    let pair = [(comp_a.clone(), 1.0), (comp_b.clone(), 1.0)];
    let composed_spec = CompositionSpec::new(
        vec![
            CompositionTerm::new(&model_a, vec![], 1.0),
            CompositionTerm::new(&model_b, vec![], 1.0),
        ],
        Reduction::Mean,
    )?;
    let composed = draw_population(&composed_spec, &ddim, &mut rng)?;
    let composed_oracle = moments_component(&pair, &ddim, &schedule)?;
    let (mean_err, cov_err) = sample_divergence(composed.view(), &composed_oracle)?;
    checks.push(OracleCheck { name: "composed_ddim_vs_step_oracle", mean_err, cov_err });

    let walked = draw_population(&composed_spec, &ancestral, &mut rng)?;
    let walked_oracle = moments_component(&pair, &ancestral, &schedule)?;
    let (mean_err, cov_err) = sample_divergence(walked.view(), &walked_oracle)?;
    checks.push(OracleCheck { name: "composed_ancestral_vs_step_oracle", mean_err, cov_err });

    for check in &checks {
        println!("{}", check.line());
    }

    if let Some(out) = out {
        prepare_out_dir(out, force)?;
        let mut manifest = RunManifest::start("oracle", seed);
        let mut csv = String::from("check,mean_err,cov_err,mean_tol,cov_tol,status\n");
        for c in &checks {
            csv.push_str(&format!(
                "{},{},{},{ORACLE_MEAN_TOL},{ORACLE_COV_TOL},{}\n",
                c.name,
                c.mean_err,
                c.cov_err,
                if c.passed() { "pass" } else { "fail" }
            ));
        }
        write_text(&out.join("oracle.csv"), &csv)?;
        manifest.output("oracle.csv");
        manifest.field(
            "oracle",
            json!({
                "samples_per_check": ORACLE_SAMPLES,
                "t_max": ORACLE_T_MAX,
                "failed": checks.iter().filter(|c| !c.passed()).count(),
            }),
        );
        manifest.finish(out, cfg)?;
    }

    let failed = checks.iter().filter(|c| !c.passed()).count();
    if failed > 0 {
        eprintln!("error[oracle]: {failed} of {} checks failed", checks.len());
        return Ok(1);
    }
    Ok(0)
}

fn load_image_for(model: &ModelHandle, path: &Path) -> Result<Array3<f32>> {
    let image = load_png(path)?;
    let want = (
        model.img_channels(),
        model.resolution(),
        model.resolution(),
    );
    if image.dim() != want {
        return Err(Error::Argument(format!(
            "{}: image shape {:?} does not match the model's {:?}",
            path.display(),
            image.dim(),
            want
        )));
    }
    Ok(image)
}
