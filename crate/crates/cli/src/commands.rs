use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use makeup_core::datagen::{generate_dataset, split_dataset, Dataset, GenerateConfig, PortraitFiles, PortraitSource};
use makeup_core::encoder::{estimate_with_crop, init_model, load_model, save_model, train, ArchConfig, Loss, Optimizer, TrainConfig};
use makeup_core::geometry::GeometrySequence;
use makeup_core::metrics::{evaluate_recovery, evaluate_triplets, load_triplet_list};
use makeup_core::oracle::{batch_report_tsv, oracle_batch, oracle_estimate, synthetic_instances, SearchConfig, SearchMethod};
use makeup_core::params::{default_presets, fit_expert_distribution};
use makeup_core::renderer::{profile, render_image, render_sequence, ProfileConfig};
use makeup_core::{FaceGeometry, GraphicsParams, ImageBuffer, RenderOptions};

use crate::args::*;
use crate::{service, UsageError};

pub fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(a, cli.seed),
        Command::Train(a) => train_cmd(a, cli.seed),
        Command::Estimate(a) => estimate_cmd(a),
        Command::Render(a) => render_cmd(a),
        Command::RenderVideo(a) => render_video(a),
        Command::EvalTriplets(a) => eval_triplets(a),
        Command::EvalRecovery(a) => eval_recovery(a, cli.seed),
        Command::Oracle(a) => oracle_cmd(a, cli.seed),
        Command::Profile(a) => profile_cmd(a, cli.seed),
        Command::Serve(a) => serve(a),
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn input_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("input file `{}` does not exist", path.display())))
    }
}

fn input_dir(path: &Path) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(usage(format!("input directory `{}` does not exist", path.display())))
    }
}

fn output_file(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() && !p.is_dir() => {
            Err(usage(format!("output directory `{}` does not exist", p.display())))
        }
        _ if path.is_dir() => Err(usage(format!("output `{}` is a directory", path.display()))),
        _ => Ok(()),
    }
}

fn output_dir(path: &Path) -> Result<()> {
    if path.is_file() {
        return Err(usage(format!("output `{}` is a file", path.display())));
    }
    output_file_parent(path)
}

fn output_file_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() && !p.is_dir() => {
            Err(usage(format!("output directory `{}` does not exist", p.display())))
        }
        _ => Ok(()),
    }
}

fn optional_output(path: &Option<PathBuf>) -> Result<()> {
    path.as_deref().map_or(Ok(()), output_file)
}

fn write_or_print(out: &Option<PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn read_params(path: &Path) -> Result<GraphicsParams> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    GraphicsParams::from_json(&text).with_context(|| format!("parsing {}", path.display()))
}

fn render_options(style: &RenderStyle) -> Result<RenderOptions> {
    let opts = RenderOptions {
        target: style.target,
        user_intensity: style.intensity,
        feather_sigma: style.feather,
    };
    opts.validate().map_err(|e| usage(e.to_string()))?;
    if !(style.feather >= 0.0 && style.feather.is_finite()) {
        return Err(usage(format!("feather {} must be a non-negative number", style.feather)));
    }
    Ok(opts)
}

/// Reads a portrait list: one `image.png geometry.json` pair per line,
/// relative paths resolved against the list's directory.
fn read_portrait_list(path: &Path) -> Result<Vec<PortraitFiles>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [image, geometry] = fields[..] else {
            return Err(usage(format!("{}:{}: expected two paths", path.display(), n + 1)));
        };
        let entry = PortraitFiles {
            image: base.join(image),
            geometry: base.join(geometry),
        };
        input_file(&entry.image)?;
        input_file(&entry.geometry)?;
        out.push(entry);
    }
    if out.is_empty() {
        return Err(usage(format!("{} lists no portraits", path.display())));
    }
    Ok(out)
}

fn gen_data(a: &GenDataArgs, seed: u64) -> Result<()> {
    output_dir(&a.out)?;
    let source = match &a.portrait_list {
        Some(list) => {
            input_file(list)?;
            PortraitSource::Files {
                entries: read_portrait_list(list)?,
            }
        }
        None => PortraitSource::Synthetic {
            seed,
            count: a.portraits,
            size: a.portrait_size,
        },
    };
    let presets = match &a.presets {
        Some(p) => {
            input_file(p)?;
            let text = fs::read_to_string(p)?;
            serde_json::from_str::<Vec<GraphicsParams>>(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => default_presets(),
    };
    let distribution = fit_expert_distribution(&presets, a.uniform_weight).map_err(|e| usage(e.to_string()))?;
    let portraits = source.load()?;
    log::info!("rendering {} samples from {} portraits", a.n, portraits.len());
    let mut ds = generate_dataset(
        &portraits,
        &GenerateConfig {
            distribution,
            n: a.n,
            target: a.target,
            crop_size: a.crop_size,
            seed,
        },
    )?;
    ds.manifest.portraits = Some(source);
    ds.write(&a.out)?;
    log::info!("wrote {} samples to {}", ds.len(), a.out.display());
    Ok(())
}

fn train_cmd(a: &TrainArgs, seed: u64) -> Result<()> {
    input_dir(&a.data)?;
    output_file(&a.out)?;
    optional_output(&a.log)?;
    let config = TrainConfig {
        learning_rate: a.lr,
        batch_size: a.batch_size,
        epochs: a.epochs,
        seed,
        optimizer: match a.optimizer {
            OptimizerArg::Adam => Optimizer::Adam,
            OptimizerArg::Sgd => Optimizer::Sgd,
        },
        val_fraction: a.val_fraction,
        loss: match a.loss {
            LossArg::Huber => Loss::Huber(a.huber_delta),
            LossArg::Mse => Loss::Mse,
        },
        cosine_decay: !a.no_cosine,
        flip_augment: !a.no_flip,
    };
    config.validate().map_err(|e| usage(e.to_string()))?;
    let ds = Dataset::load(&a.data)?;
    let (train_set, val_set) = split_dataset(&ds, 1.0 - a.val_fraction, seed)?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(anyhow!("dataset of {} samples is too small to split", ds.len()));
    }
    let arch = ArchConfig {
        input_size: ds.manifest.crop_size,
        ..ArchConfig::default()
    };
    let mut model = init_model(&arch, seed)?;
    model.set_tag(format!("{}-{}px-s{seed}", ds.manifest.target, ds.manifest.crop_size));
    log::info!("training on {} samples, validating on {}", train_set.len(), val_set.len());
    let (model, log) = train(&model, &train_set, &val_set, &config)?;
    save_model(&model, &a.out)?;
    if let Some(p) = &a.log {
        fs::write(p, log.to_csv()).with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(best) = log.best() {
        log::info!("best epoch {} val_mae {:.5}; saved {}", best.epoch, best.val_mae, model.tag());
    }
    Ok(())
}

fn estimate_cmd(a: &EstimateArgs) -> Result<()> {
    input_file(&a.model)?;
    input_file(&a.image)?;
    input_file(&a.geometry)?;
    if let Some(p) = &a.crop_out {
        output_file(p)?;
    }
    let model = load_model(&a.model)?;
    let image = ImageBuffer::load_png(&a.image)?;
    let geometry = FaceGeometry::load(&a.geometry)?;
    let (params, crop) = estimate_with_crop(&model, &image, &geometry, a.target)?;
    if let Some(p) = &a.crop_out {
        crop.save_png(p)?;
    }
    println!("{}", params.to_json());
    Ok(())
}

fn render_cmd(a: &RenderArgs) -> Result<()> {
    input_file(&a.image)?;
    input_file(&a.geometry)?;
    input_file(&a.params)?;
    output_file(&a.out)?;
    let opts = render_options(&a.style)?;
    let params = read_params(&a.params)?;
    let image = ImageBuffer::load_png(&a.image)?;
    let geometry = FaceGeometry::load(&a.geometry)?;
    render_image(&image, &geometry, &params, &opts)?.save_png(&a.out)?;
    Ok(())
}

fn render_video(a: &RenderVideoArgs) -> Result<()> {
    input_dir(&a.frames)?;
    input_file(&a.geometry)?;
    input_file(&a.params)?;
    output_dir(&a.out)?;
    let opts = render_options(&a.style)?;
    let params = read_params(&a.params)?;
    let mut names: Vec<PathBuf> = fs::read_dir(&a.frames)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(usage(format!("no PNG frames in {}", a.frames.display())));
    }
    let seq = GeometrySequence::load(&a.geometry)?;
    let frames = names
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let geometry = seq.get(i).ok_or_else(|| anyhow!("frame {i}: no geometry"))?.clone();
            Ok((ImageBuffer::load_png(p)?, geometry))
        })
        .collect::<Result<Vec<_>>>()?;
    let out = render_sequence(&frames, &params, &opts)?;
    fs::create_dir_all(&a.out)?;
    for (name, img) in names.iter().zip(&out) {
        img.save_png(a.out.join(name.file_name().expect("file name")))?;
    }
    log::info!("rendered {} frames into {}", out.len(), a.out.display());
    Ok(())
}

fn eval_triplets(a: &EvalTripletsArgs) -> Result<()> {
    input_file(&a.model)?;
    input_file(&a.list)?;
    optional_output(&a.out)?;
    let model = load_model(&a.model)?;
    let records = load_triplet_list(&a.list)?
        .iter()
        .enumerate()
        .map(|(i, t)| t.load(i.to_string()).with_context(|| format!("triplet {i}")))
        .collect::<Result<Vec<_>>>()?;
    let report = evaluate_triplets(&records, &model, a.target)?;
    for (id, why) in &report.failed {
        log::warn!("triplet {id} skipped: {why}");
    }
    write_or_print(&a.out, &report.to_text())
}

fn eval_recovery(a: &EvalRecoveryArgs, seed: u64) -> Result<()> {
    input_file(&a.model)?;
    input_dir(&a.data)?;
    optional_output(&a.out)?;
    let model = load_model(&a.model)?;
    let ds = Dataset::load(&a.data)?;
    let source = ds
        .manifest
        .portraits
        .clone()
        .ok_or_else(|| anyhow!("dataset manifest does not record its portraits"))?;
    let portraits = source.load()?;
    let subset = match a.split {
        Split::All => ds,
        Split::Val => split_dataset(&ds, 1.0 - a.val_fraction, seed).map_err(|e| usage(e.to_string()))?.1,
    };
    let report = evaluate_recovery(&subset, &portraits, &model)?;
    write_or_print(&a.out, &report.to_text())
}

fn oracle_cmd(a: &OracleArgs, seed: u64) -> Result<()> {
    optional_output(&a.out)?;
    let config = SearchConfig {
        method: match a.method {
            MethodArg::NelderMead => SearchMethod::NelderMead,
            MethodArg::CoordinateSearch => SearchMethod::CoordinateSearch,
        },
        max_evals: a.max_evals,
        seed,
        ..SearchConfig::default()
    };
    config.validate().map_err(|e| usage(e.to_string()))?;
    if let (Some(src), Some(geom), Some(reference)) = (&a.source, &a.geometry, &a.reference) {
        input_file(src)?;
        input_file(geom)?;
        input_file(reference)?;
        let source = ImageBuffer::load_png(src)?;
        let geometry = FaceGeometry::load(geom)?;
        let reference = ImageBuffer::load_png(reference)?;
        let r = oracle_estimate(&source, &geometry, &reference, a.target, &config)?;
        let doc = serde_json::json!({
            "params": r.params,
            "residual": r.residual,
            "initial_residual": r.initial_residual,
            "evaluations": r.evaluations,
            "converged": r.converged,
            "unidentifiable": r.unidentifiable_names(),
        });
        return write_or_print(&a.out, &format!("{}\n", serde_json::to_string_pretty(&doc)?));
    }
    if a.instances == 0 {
        return Err(usage("--instances must be at least 1"));
    }
    let instances = synthetic_instances(seed, a.instances, a.portrait_size, a.target, a.min_opacity)
        .map_err(|e| usage(e.to_string()))?;
    let records = oracle_batch(&instances, &config)?;
    let mut text = batch_report_tsv(&records);
    let color_err = records
        .iter()
        .flat_map(|r| (0..3).map(|c| r.truth.color()[c].abs_diff(r.result.params.color()[c])))
        .max()
        .unwrap_or(0);
    let opacity_err = records
        .iter()
        .map(|r| (r.truth.opacity() - r.result.params.opacity()).abs())
        .fold(0.0, f64::max);
    let evals = records.iter().map(|r| r.result.evaluations).max().unwrap_or(0);
    text.push_str(&format!(
        "# summary\tinstances={}\tmax_color_error={color_err}\tmax_opacity_error={opacity_err:.6}\tmax_evaluations={evals}\n",
        records.len()
    ));
    write_or_print(&a.out, &text)
}

/// A glossy red that exercises every stage.
fn profile_default_params() -> GraphicsParams {
    GraphicsParams::new(0.8, [170, 30, 50], 1.0, 0.3, 0.5).expect("valid params")
}

fn profile_cmd(a: &ProfileArgs, seed: u64) -> Result<()> {
    if let Some(p) = &a.params {
        input_file(p)?;
    }
    optional_output(&a.json)?;
    if a.measured == 0 {
        return Err(usage("--measured must be at least 1"));
    }
    if a.frames == 0 || a.size < 16 {
        return Err(usage("--frames must be at least 1 and --size at least 16"));
    }
    let params = match &a.params {
        Some(p) => read_params(p)?,
        None => profile_default_params(),
    };
    let frames: Vec<_> = makeup_core::datagen::synthetic_portraits(seed, a.frames, a.size)
        .into_iter()
        .map(|p| (p.image, p.geometry))
        .collect();
    let report = profile(
        &frames,
        &params,
        &RenderOptions::new(a.target),
        ProfileConfig {
            warmup: a.warmup,
            measured: a.measured,
        },
    )?;
    print!("{}", report.to_table());
    if let Some(p) = &a.json {
        fs::write(p, report.to_json()).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn serve(a: &ServeArgs) -> Result<()> {
    input_file(&a.model)?;
    if a.max_inflight == 0 {
        return Err(usage("--max-inflight must be at least 1"));
    }
    let model = load_model(&a.model).context("loading model")?;
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(service::serve(
        model,
        service::ServeConfig {
            bind: a.bind.clone(),
            port: a.port,
            max_inflight: a.max_inflight,
        },
    ))
}
