use std::fs;
use std::path::Path;

use log::{info, warn};
use nanolens::checkpoint::{load_checkpoint, save_checkpoint};
use nanolens::data::{ingest_dataset, load_image, synth, DatasetIndex};
use nanolens::train::{
    history_csv, make_surrogate_base, train_autoencoder, train_classifier, Regime, SurrogateConfig,
    TrainConfig, TrainOutcome,
};
use nanolens::viz::{
    extract_activations, filter_atlas, filter_png, visualize_filter, GradientAscentConfig,
    CSV_HEADER,
};
use nanolens::{build_autoencoder, build_classifier, AutoencoderConfig, ClassifierConfig, ModelSpec};

use crate::args::{
    CorpusArgs, CorpusKind, FiltersArgs, LensArgs, SurrogateArgs, TrainCaeArgs, TrainClsArgs,
    TrainingFlags,
};
use crate::error::{CliError, CliResult};
use crate::manifest::{write_atomic, ManifestBuilder};

pub const MODEL_FILE: &str = "model.ckpt";
pub const HISTORY_FILE: &str = "history.csv";

fn train_config(f: &TrainingFlags) -> CliResult<TrainConfig> {
    let cfg = TrainConfig {
        epochs: f.epochs,
        batch_size: f.batch_size,
        learning_rate: f.lr,
        optimizer: f.optimizer,
        seed: f.seed,
        image_size: f.size,
        train_fraction: f.train_fraction,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

fn create_out(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::runtime(format!("cannot create {}: {e}", dir.display())))
}

fn write_file(m: &mut ManifestBuilder, dir: &Path, name: &str, bytes: &[u8]) -> CliResult<()> {
    write_atomic(&dir.join(name), bytes)
        .map_err(|e| CliError::runtime(format!("cannot write {}: {e}", dir.join(name).display())))?;
    m.output(name);
    Ok(())
}

fn ingest(data: &Path) -> CliResult<DatasetIndex> {
    let index = ingest_dataset(data)?;
    for w in &index.warnings {
        warn!("{w}");
    }
    info!(
        "{} images in {} classes under {}",
        index.len(),
        index.num_classes(),
        data.display()
    );
    Ok(index)
}

fn save_run(
    m: &mut ManifestBuilder,
    out: &Path,
    outcome: &TrainOutcome,
    val_column: &str,
) -> CliResult<()> {
    let ckpt = out.join(MODEL_FILE);
    save_checkpoint(&outcome.best, &ckpt)?;
    m.output_checkpoint(&ckpt);
    write_file(
        m,
        out,
        HISTORY_FILE,
        history_csv(&outcome.history, Some(val_column)).as_bytes(),
    )?;
    let last = outcome.history.last().expect("at least one epoch");
    println!(
        "best epoch {} of {}; final train_loss {:.6}; checkpoint {}",
        outcome.best_epoch,
        outcome.history.len(),
        last.train_loss,
        ckpt.display()
    );
    Ok(())
}

pub fn train_cae(args: &TrainCaeArgs) -> CliResult<()> {
    let tc = train_config(&args.train)?;
    let ae = AutoencoderConfig {
        input_size: args.train.size,
        channel_schedule: args.channels.clone(),
        ..AutoencoderConfig::default()
    };
    ae.validate()?;
    let index = ingest(&args.data)?;
    let mut m = ManifestBuilder::new("train-cae", args, Some(tc.seed), &args.out);
    m.resolved("autoencoder", &ae);
    m.resolved("train", &tc);
    let model = build_autoencoder::<f32>(&ae, tc.seed)?;
    let outcome = train_autoencoder(&model, &index, &tc)?;
    create_out(&args.out)?;
    save_run(&mut m, &args.out, &outcome, "val_loss")?;
    m.finish()?;
    Ok(())
}

fn conv_channels_of(model: &ModelSpec<f32>) -> Vec<usize> {
    model.conv_layers().map(|(_, c)| c.out_channels()).collect()
}

pub fn train_cls(args: &TrainClsArgs) -> CliResult<()> {
    let tc = train_config(&args.train)?;
    let base = match (args.regime, &args.base) {
        (r, None) if r.needs_base() => {
            return Err(CliError::usage(format!(
                "--regime {} requires --base CKPT",
                r.to_string().to_lowercase()
            )))
        }
        (Regime::A3, Some(p)) => {
            warn!("--base {} is ignored under regime a3", p.display());
            None
        }
        (_, Some(p)) => Some(load_checkpoint(p)?),
        (_, None) => None,
    };
    let defaults = ClassifierConfig::default();
    let conv_channels = match (&args.conv_channels, &base) {
        (Some(c), _) => c.clone(),
        (None, Some(b)) => conv_channels_of(b),
        (None, None) => defaults.conv_channels.clone(),
    };
    let mut cc = ClassifierConfig {
        input_size: args.train.size,
        conv_channels,
        hidden_units: args.hidden.unwrap_or(defaults.hidden_units),
        ..defaults
    };
    let index = ingest(&args.data)?;
    cc.num_classes = index.num_classes();
    cc.validate()?;
    let mut m = ManifestBuilder::new("train-cls", args, Some(tc.seed), &args.out);
    m.resolved("classifier", &cc);
    m.resolved("train", &tc);
    m.resolved("class_names", &index.class_names);
    if let (Some(p), Some(_)) = (&args.base, &base) {
        m.input_checkpoint(p);
    }
    let model = build_classifier::<f32>(&cc, tc.seed)?;
    let outcome = train_classifier(&model, &index, &tc, args.regime, base.as_ref())?;
    create_out(&args.out)?;
    save_run(&mut m, &args.out, &outcome, "val_accuracy")?;
    m.finish()?;
    Ok(())
}

pub fn make_surrogate(args: &SurrogateArgs) -> CliResult<()> {
    let tc = train_config(&args.train)?;
    let cc = ClassifierConfig {
        input_size: args.train.size,
        conv_channels: args.conv_channels.clone(),
        hidden_units: args.hidden,
        ..ClassifierConfig::default()
    };
    let mut sc = SurrogateConfig::for_classifier(&cc, &tc);
    sc.images_per_class = args.per_class;
    sc.classifier.validate()?;
    if sc.images_per_class == 0 {
        return Err(CliError::usage("--per-class must be at least 1"));
    }
    let mut m = ManifestBuilder::new("make-surrogate", args, Some(tc.seed), &args.out);
    m.resolved("surrogate", &sc);
    let outcome = make_surrogate_base(&sc)?;
    create_out(&args.out)?;
    save_run(&mut m, &args.out, &outcome, "val_accuracy")?;
    m.finish()?;
    Ok(())
}

pub fn make_corpus(args: &CorpusArgs) -> CliResult<()> {
    if args.per_class == 0 || args.size == 0 {
        return Err(CliError::usage("--per-class and --size must be positive"));
    }
    let dataset = match args.kind {
        CorpusKind::StripesDots => synth::stripes_and_dots(args.per_class, args.size, args.seed),
        CorpusKind::Gratings => synth::oriented_gratings(args.per_class, args.size, args.seed),
    };
    let mut m = ManifestBuilder::new("make-corpus", args, Some(args.seed), &args.out);
    create_out(&args.out)?;
    synth::write_corpus(&dataset, &args.out)?;
    for name in &dataset.class_names {
        m.output(format!("{name}/"));
    }
    println!(
        "{} images in {} classes written to {}",
        dataset.len(),
        dataset.num_classes(),
        args.out.display()
    );
    m.finish()?;
    Ok(())
}

pub fn lens_png_name(depth: usize) -> String {
    format!("depth_{depth:02}.png")
}

pub const LENS_CSV: &str = "lens.csv";

pub fn lens(args: &LensArgs) -> CliResult<()> {
    let model = load_checkpoint(&args.ckpt)?;
    // Reject every bad depth before rendering anything.
    let max = model.max_depth();
    if let Some(&bad) = args.depth.iter().find(|&&d| d == 0 || d > max) {
        return Err(nanolens::Error::DepthOutOfRange { depth: bad, min: 1, max }.into());
    }
    let [_, h, w] = model.input_shape;
    let image = load_image(&args.image, h.max(w))?;
    let mut m = ManifestBuilder::new("lens", args, None, &args.out);
    m.input_checkpoint(&args.ckpt);
    create_out(&args.out)?;
    let mut csv = format!("depth,{CSV_HEADER}");
    for &depth in &args.depth {
        let grid = extract_activations(&model, depth, &image)?;
        let name = lens_png_name(depth);
        write_file(&mut m, &args.out, &name, &grid.png()?)?;
        for row in grid.csv().lines().skip(1) {
            csv.push_str(&format!("{depth},{row}\n"));
        }
        println!(
            "depth {depth}: layer {} ({} maps of {}x{}) -> {}",
            grid.layer,
            grid.channels,
            grid.height,
            grid.width,
            args.out.join(&name).display()
        );
    }
    write_file(&mut m, &args.out, LENS_CSV, csv.as_bytes())?;
    m.finish()?;
    Ok(())
}

pub const FILTERS_CSV: &str = "scores.csv";

pub fn filters(args: &FiltersArgs) -> CliResult<()> {
    let model = load_checkpoint(&args.ckpt)?;
    let cfg = GradientAscentConfig {
        steps: args.steps,
        step_size: args.step_size,
        seed: args.seed,
        max_backtracks: args.max_backtracks,
        clamp: !args.no_clamp,
        ..GradientAscentConfig::default()
    };
    cfg.validate()?;
    let count = model.filter_count(args.layer)?;
    if let Some(f) = args.filter {
        if f >= count {
            return Err(nanolens::Error::FilterOutOfRange {
                layer: args.layer,
                filter: f,
                count,
            }
            .into());
        }
    }
    let mut m = ManifestBuilder::new("filters", args, Some(args.seed), &args.out);
    m.resolved("ascent", &cfg);
    m.input_checkpoint(&args.ckpt);
    create_out(&args.out)?;
    let (name, png, csv) = match args.filter {
        Some(f) => {
            let v = visualize_filter(&model, args.layer, f, &cfg)?;
            println!(
                "layer {} filter {f}: score {:.6} -> {:.6}{}",
                args.layer,
                v.initial_score,
                v.score,
                if v.dead { " (dead)" } else { "" }
            );
            let csv = nanolens::viz::filter_csv(std::slice::from_ref(&v));
            (format!("filter_l{}_f{f}.png", args.layer), filter_png(&v)?, csv)
        }
        None => {
            let atlas = filter_atlas(&model, args.layer, &cfg)?;
            let dead = atlas.tiles.iter().filter(|t| t.dead).count();
            println!("layer {}: {} filters, {dead} dead", args.layer, atlas.tiles.len());
            (format!("atlas_l{}.png", args.layer), atlas.png()?, atlas.csv())
        }
    };
    write_file(&mut m, &args.out, &name, &png)?;
    write_file(&mut m, &args.out, FILTERS_CSV, csv.as_bytes())?;
    m.finish()?;
    Ok(())
}
