use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use reconnet::datapipe::{
    extract_patches, list_images, read_image, split_train_val, write_pgm, PatchDataset, Split, PATCH_SIDE,
};
use reconnet::evalkit::{self, EvalModel};
use reconnet::models::{
    Checkpoint, Discriminator, DiscriminatorSpec, Encoder, FcInit, FirstStage, ReconNet, ReconNetSpec,
};
use reconnet::rng::mix_seed;
use reconnet::sensing::{gen_gaussian_orthonormal, MeasurementMatrix, NoiseSpec, BLOCK_PIXELS};
use reconnet::training::{
    self, finetune_fc, search_learning_rate, select_by_validation, train_adversarial, train_adversarial_autoencoder,
    train_autoencoder, train_euclidean, AdamParams, GanConfig, OptimizerKind, TrainConfig, TrainPairs,
};
use reconnet::{synth, Error, Prng};

use crate::{FcInitArg, OptArgs, OptimizerArg, Variant};

pub const EXIT_INPUT: u8 = 2;
pub const EXIT_DIVERGENCE: u8 = 3;
pub const EXIT_USAGE: u8 = 64;

/// A flag combination or value rejected before any work starts.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return EXIT_USAGE;
        }
        if let Some(Error::Divergence { .. }) = cause.downcast_ref::<Error>() {
            return EXIT_DIVERGENCE;
        }
    }
    EXIT_INPUT
}

/// Seed offsets for the independent random components of one run.
mod salt {
    pub const PHI: u64 = 1;
    pub const INIT: u64 = 2;
    pub const DISCRIMINATOR: u64 = 3;
    pub const ENCODER: u64 = 4;
    pub const TRAIN: u64 = 5;
}

const ADAM_LR: f64 = 1e-3;
const SGD_LR_GRID: [f64; 3] = [1e-5, 1e-6, 1e-7];

fn check_mr(mr: f64) -> Result<()> {
    if !(mr > 0.0 && mr <= 1.0) {
        return Err(usage(format!("--mr {mr} must be in (0, 1]")));
    }
    Ok(())
}

fn train_config(opt: &OptArgs, iterations: usize, seed: u64) -> Result<TrainConfig> {
    let (optimizer, default_lr) = match opt.optimizer {
        OptimizerArg::Sgd => (OptimizerKind::Sgd { momentum: opt.momentum }, training::DEFAULT_SGD_LR),
        OptimizerArg::Adam => (OptimizerKind::Adam(AdamParams::default()), ADAM_LR),
    };
    let learning_rate = opt.lr.unwrap_or(default_lr);
    if !(learning_rate >= 0.0) || !learning_rate.is_finite() {
        return Err(usage(format!("--lr {learning_rate} must be finite and >= 0")));
    }
    Ok(TrainConfig {
        batch_size: opt.batch as usize,
        iterations,
        learning_rate,
        optimizer,
        seed: mix_seed(seed, salt::TRAIN),
        validation_fraction: 0.0,
    })
}

fn load_dataset(path: &Path) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let ds = PatchDataset::load(path).with_context(|| format!("reading dataset {}", path.display()))?;
    if ds.side != PATCH_SIDE {
        bail!(
            "dataset {} holds {}×{} patches, 33×33 required",
            path.display(),
            ds.side,
            ds.side
        );
    }
    let train = ds.blocks(Split::Train);
    if train.is_empty() {
        bail!("dataset {} has no training patches", path.display());
    }
    Ok((train, ds.blocks(Split::Val)))
}

fn load_checkpoint(path: &Path) -> Result<(Checkpoint, MeasurementMatrix)> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    let phi = ckpt
        .phi
        .clone()
        .with_context(|| format!("checkpoint {} carries no measurement matrix", path.display()))?;
    if phi.m() != ckpt.model.m() || phi.n() != BLOCK_PIXELS {
        bail!(
            "checkpoint {} pairs a {}×{} Φ with an m = {} model",
            path.display(),
            phi.m(),
            phi.n(),
            ckpt.model.m()
        );
    }
    Ok((ckpt, phi))
}

pub fn make_dataset(images: &Path, out: &Path, stride: usize, val_frac: f64, seed: u64) -> Result<()> {
    if !(0.0..1.0).contains(&val_frac) {
        return Err(usage(format!("--val-frac {val_frac} must be in [0, 1)")));
    }
    let files = list_images(images).with_context(|| format!("listing {}", images.display()))?;
    if files.is_empty() {
        bail!("no images (.pgm, .png, .bmp, .jpg) in {}", images.display());
    }
    let mut ds = PatchDataset::empty(PATCH_SIDE);
    for f in &files {
        let name = f.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let img = read_image(f).with_context(|| format!("reading {}", f.display()))?;
        let patches = extract_patches(&img, &name, PATCH_SIDE, stride).with_context(|| format!("patches of {name}"))?;
        log::debug!("{name}: {} patches", patches.len());
        ds.extend(patches)?;
    }
    let ds = split_train_val(&ds, val_frac, seed)?;
    ds.save(out).with_context(|| format!("writing {}", out.display()))?;
    println!(
        "{} patches ({} train, {} validation) from {} images -> {}",
        ds.len(),
        ds.count(Split::Train),
        ds.count(Split::Val),
        files.len(),
        out.display()
    );
    Ok(())
}

pub struct TrainArgs {
    pub variant: Variant,
    pub mr: f64,
    pub dataset: PathBuf,
    pub out: PathBuf,
    pub circulant: Option<usize>,
    pub iters: usize,
    pub seed: u64,
    pub fc_init: FcInitArg,
    pub lr_search: bool,
    pub opt: OptArgs,
    pub lambda_adv: f64,
    pub lambda_rec: f64,
    pub g_steps: usize,
    pub lr_d: f64,
    pub loss_csv: Option<PathBuf>,
}

fn default_csv(out: &Path, given: Option<PathBuf>) -> PathBuf {
    given.unwrap_or_else(|| {
        let mut s = out.as_os_str().to_owned();
        s.push(".loss.csv");
        PathBuf::from(s)
    })
}

/// A trained candidate: model, Φ, loss CSV text and descriptive metadata.
struct Trained {
    model: ReconNet,
    phi: MeasurementMatrix,
    csv: String,
    meta: BTreeMap<String, String>,
}

pub fn train(a: TrainArgs) -> Result<()> {
    check_mr(a.mr)?;
    if a.variant.learns_phi() && a.fc_init == FcInitArg::Phit {
        return Err(usage(
            "--fc-init phit needs a fixed Φ; learned-Φ variants start from random weights",
        ));
    }
    if a.circulant.is_some() && a.fc_init == FcInitArg::Phit {
        return Err(usage("--fc-init phit applies to an FC first stage, not --circulant"));
    }
    if a.lr_search && (a.variant != Variant::Euc) {
        return Err(usage("--lr-search is available for --variant euc only"));
    }
    if !(a.lambda_adv >= 0.0 && a.lambda_rec >= 0.0 && a.lr_d >= 0.0) {
        return Err(usage("loss weights and learning rates must be >= 0"));
    }
    let cfg = train_config(&a.opt, a.iters, a.seed)?;
    let (train_blocks, val_blocks) = load_dataset(&a.dataset)?;
    let first_stage = a
        .circulant
        .map_or(FirstStage::Fc, |gamma| FirstStage::CirculantBank { gamma });
    let units = if a.variant.adversarial() { 1 } else { 2 };
    let spec = ReconNetSpec::new(a.mr, units, first_stage)?;
    let gan = GanConfig {
        lambda_rec: a.lambda_rec,
        lambda_adv: a.lambda_adv,
        lr_g: a.opt.lr.unwrap_or(ADAM_LR),
        lr_d: a.lr_d,
        g_steps_per_d: a.g_steps,
        iterations: a.iters,
        batch_size: a.opt.batch as usize,
        adam: AdamParams::default(),
        seed: cfg.seed,
    };
    let random_init = FcInit::default_gaussian(spec.m);

    let trained = if a.variant.learns_phi() {
        let mut enc = Encoder::build(spec.m, &mut Prng::new(mix_seed(a.seed, salt::ENCODER)))?;
        let mut dec = ReconNet::build(&spec, random_init, &mut Prng::new(mix_seed(a.seed, salt::INIT)))?;
        let (phi, csv) = if a.variant.adversarial() {
            let mut d = discriminator(a.seed)?;
            let (phi, h) = train_adversarial_autoencoder(&mut enc, &mut dec, &mut d, &train_blocks, &gan)?;
            log_gan(&h);
            (phi, training::gan_csv(&h))
        } else {
            let (phi, h) = train_autoencoder(&mut enc, &mut dec, &train_blocks, &cfg)?;
            (phi, training::loss_csv(&h))
        };
        Trained {
            model: dec,
            phi,
            csv,
            meta: BTreeMap::from([("fc_init".to_string(), "random".to_string())]),
        }
    } else {
        let phi = gen_gaussian_orthonormal(BLOCK_PIXELS, a.mr, mix_seed(a.seed, salt::PHI))?;
        let train_pairs = TrainPairs::measure(&phi, &train_blocks)?;
        let val_pairs = if val_blocks.is_empty() {
            log::info!("no validation patches; model selection uses the training patches");
            train_pairs.clone()
        } else {
            TrainPairs::measure(&phi, &val_blocks)?
        };
        let inits: Vec<(&str, FcInit<'_>)> = match (a.fc_init, first_stage) {
            (FcInitArg::Random, _) | (FcInitArg::Select, FirstStage::CirculantBank { .. }) => {
                vec![("random", random_init)]
            }
            (FcInitArg::Phit, _) => vec![("phit", FcInit::FromPhi(&phi))],
            (FcInitArg::Select, FirstStage::Fc) => vec![("random", random_init), ("phit", FcInit::FromPhi(&phi))],
        };
        let mut candidates = Vec::new();
        for (label, init) in inits {
            let mut model = ReconNet::build(&spec, init, &mut Prng::new(mix_seed(a.seed, salt::INIT)))?;
            let mut meta = BTreeMap::from([("fc_init".to_string(), label.to_string())]);
            let csv = if a.variant.adversarial() {
                let mut d = discriminator(a.seed)?;
                let h = train_adversarial(&mut model, &mut d, &train_pairs, &gan)?;
                log_gan(&h);
                training::gan_csv(&h)
            } else if a.lr_search {
                let grid: &[f64] = match a.opt.optimizer {
                    OptimizerArg::Sgd => &SGD_LR_GRID,
                    OptimizerArg::Adam => &training::LR_GRID,
                };
                let (m, lr, h) = search_learning_rate(&model, &train_pairs, &val_pairs, &cfg, grid)?;
                model = m;
                meta.insert("lr".to_string(), lr.to_string());
                training::loss_csv(&h)
            } else {
                training::loss_csv(&train_euclidean(&mut model, &train_pairs, &cfg)?)
            };
            candidates.push(Trained {
                model,
                phi: phi.clone(),
                csv,
                meta,
            });
        }
        let models: Vec<ReconNet> = candidates.iter().map(|c| c.model.clone()).collect();
        let pick = select_by_validation(&models, &val_pairs)?;
        if candidates.len() > 1 {
            println!(
                "selected fc-init {} by validation loss",
                candidates[pick].meta["fc_init"]
            );
        }
        candidates.swap_remove(pick)
    };

    let mut ckpt = Checkpoint::new(trained.model, Some(trained.phi))
        .with_meta("variant", a.variant.name())
        .with_meta("seed", a.seed)
        .with_meta("iterations", a.iters);
    ckpt.metadata.extend(trained.meta);
    ckpt.metadata.entry("lr".to_string()).or_insert_with(|| {
        if a.variant.adversarial() {
            gan.lr_g
        } else {
            cfg.learning_rate
        }
        .to_string()
    });
    ckpt.save(&a.out)
        .with_context(|| format!("writing {}", a.out.display()))?;
    let csv_path = default_csv(&a.out, a.loss_csv);
    fs::write(&csv_path, &trained.csv).with_context(|| format!("writing {}", csv_path.display()))?;
    let m = ckpt.model.spec();
    println!(
        "{} mr {} (m = {}), {} unit(s), {}: {} parameters without biases -> {}",
        a.variant.name(),
        m.mr,
        m.m,
        m.n_units,
        match m.first_stage {
            FirstStage::Fc => "FC first stage".to_string(),
            FirstStage::CirculantBank { gamma } => format!("{gamma} circulant layers"),
        },
        ckpt.model.param_count(false),
        a.out.display()
    );
    Ok(())
}

fn discriminator(seed: u64) -> Result<Discriminator> {
    Ok(Discriminator::build(
        &DiscriminatorSpec::default(),
        &mut Prng::new(mix_seed(seed, salt::DISCRIMINATOR)),
    )?)
}

fn log_gan(h: &training::GanHistory) {
    if let (Some(r), Some(f)) = (h.d_real.last(), h.d_fake.last()) {
        log::info!(
            "{} G updates, {} D updates; last D(real) {r:.3}, D(fake) {f:.3}",
            h.g_updates,
            h.d_updates
        );
    }
}

#[allow(clippy::too_many_arguments)]
pub fn finetune(
    base: &Path,
    mr: f64,
    dataset: &Path,
    out: &Path,
    iters: usize,
    seed: u64,
    opt: &OptArgs,
    loss_csv: Option<PathBuf>,
) -> Result<()> {
    check_mr(mr)?;
    let cfg = train_config(opt, iters, seed)?;
    let base_ckpt = Checkpoint::load(base).with_context(|| format!("reading checkpoint {}", base.display()))?;
    if base_ckpt.model.spec().first_stage != FirstStage::Fc {
        bail!(
            "{} has a circulant first stage; only FC layers can be fine-tuned",
            base.display()
        );
    }
    let (train_blocks, _) = load_dataset(dataset)?;
    let phi = gen_gaussian_orthonormal(BLOCK_PIXELS, mr, mix_seed(seed, salt::PHI))?;
    let (model, history) = finetune_fc(&base_ckpt.model, &phi, &train_blocks, &cfg)?;
    let variant = base_ckpt
        .metadata
        .get("variant")
        .cloned()
        .unwrap_or_else(|| "unknown".into());
    let ckpt = Checkpoint::new(model, Some(phi))
        .with_meta("variant", format!("{variant}-ft"))
        .with_meta("base_mr", base_ckpt.model.spec().mr)
        .with_meta("seed", seed)
        .with_meta("iterations", iters)
        .with_meta("lr", cfg.learning_rate);
    ckpt.save(out).with_context(|| format!("writing {}", out.display()))?;
    let csv_path = default_csv(out, loss_csv);
    fs::write(&csv_path, training::loss_csv(&history)).with_context(|| format!("writing {}", csv_path.display()))?;
    println!(
        "fine-tuned FC for mr {} (m = {}) over {iters} iterations; convolutions unchanged -> {}",
        mr,
        ckpt.model.m(),
        out.display()
    );
    Ok(())
}

fn noise_spec(sigma: f64) -> Result<NoiseSpec> {
    NoiseSpec::new(sigma).map_err(|_| usage(format!("--sigma {sigma} must be finite and >= 0")))
}

pub fn reconstruct(model: &Path, input: &Path, output: &Path, sigma: f64, seed: u64) -> Result<()> {
    let noise = noise_spec(sigma)?;
    let (ckpt, phi) = load_checkpoint(model)?;
    let img = read_image(input).with_context(|| format!("reading {}", input.display()))?;
    let (rec, seconds) = evalkit::reconstruct_image(&ckpt.model, &phi, &img, noise, seed)?;
    write_pgm(&rec, output).with_context(|| format!("writing {}", output.display()))?;
    println!(
        "psnr {} dB, {:.4} s for {} blocks -> {}",
        evalkit::format_psnr(evalkit::psnr(&img, &rec)?),
        seconds,
        evalkit::forward_passes(&img),
        output.display()
    );
    Ok(())
}

pub fn eval(models: &[PathBuf], testdir: &Path, out: &Path, sigmas: &[f64], seed: u64) -> Result<()> {
    if models.is_empty() {
        return Err(usage("--models needs at least one checkpoint"));
    }
    for &s in sigmas {
        noise_spec(s)?;
    }
    let loaded = models.iter().map(|p| load_checkpoint(p)).collect::<Result<Vec<_>>>()?;
    let variants: Vec<String> = loaded
        .iter()
        .map(|(c, _)| c.metadata.get("variant").cloned().unwrap_or_else(|| "unknown".into()))
        .collect();
    let files = list_images(testdir).with_context(|| format!("listing {}", testdir.display()))?;
    if files.is_empty() {
        bail!("no test images in {}", testdir.display());
    }
    let images = files
        .iter()
        .map(|f| {
            let name = f.file_name().unwrap_or_default().to_string_lossy().into_owned();
            read_image(f)
                .with_context(|| format!("reading {}", f.display()))
                .map(|img| (name, img))
        })
        .collect::<Result<Vec<_>>>()?;
    let eval_models: Vec<EvalModel<'_>> = loaded
        .iter()
        .zip(&variants)
        .map(|((c, phi), v)| EvalModel {
            variant: v,
            model: &c.model,
            phi,
        })
        .collect();
    let mut mrs: Vec<f64> = Vec::new();
    for m in &eval_models {
        if !mrs.contains(&m.phi.mr) {
            mrs.push(m.phi.mr);
        }
    }
    let report = evalkit::run_eval(&eval_models, &images, &mrs, sigmas, seed)?;
    fs::write(out, report.to_csv()).with_context(|| format!("writing {}", out.display()))?;
    for &s in sigmas {
        if let Some(p) = report.mean_psnr(s) {
            println!("sigma {s}: mean psnr {} dB", evalkit::format_psnr(p));
        }
    }
    println!("{} rows -> {}", report.rows.len(), out.display());
    Ok(())
}

pub fn bench(model: &Path, side: usize, repeats: usize) -> Result<()> {
    let (ckpt, phi) = load_checkpoint(model)?;
    let r = evalkit::bench(&ckpt.model, &phi, side, repeats)?;
    println!(
        "median {:.4} s over {repeats} repeats ({side}×{side}, {} blocks)",
        r.median_seconds,
        evalkit::TileGeometry::of(side, side).blocks()
    );
    Ok(())
}

pub fn synth(out: &Path, count: u64, side: usize, seed: u64) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for i in 0..count {
        let img = synth::natural_image(side, side, mix_seed(seed, i))?;
        let path = out.join(format!("synth_{i:03}.pgm"));
        write_pgm(&img, &path).with_context(|| format!("writing {}", path.display()))?;
    }
    println!("{count} scenes of {side}×{side} -> {}", out.display());
    Ok(())
}
