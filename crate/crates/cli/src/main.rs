use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;

use movingparts::data::synthetic::{generate_synthetic, load_masks, write_synthetic, SyntheticSceneSpec};
use movingparts::data::{load_dataset, read_labels, read_png, write_labels, write_png16, write_png8, Dataset, Image};
use movingparts::eval::{miou, psnr, ssim, MiouMode};
use movingparts::parts::{
    apply_edit, discover_parts, label_color, render_edited, render_segmentation, trace_path, EditScript, PartModel,
    PartOptions,
};
use movingparts::render::{render_image, ModelField, RenderedImage};
use movingparts::train::{load_model, LossBreakdown, Trained, TrainConfig, Trainer};

#[derive(Parser)]
#[command(name = "movingparts", version, about = "Dynamic scene reconstruction with motion-based part discovery")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset with ground-truth masks and trajectories.
    Gen {
        /// Scene description (TOML). Defaults to the built-in two-body scene.
        #[arg(long)]
        scene_spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fit a model to a dataset and write `model.ckpt`, `config.txt` and `log.tsv`.
    Train {
        #[command(flatten)]
        data: DataArgs,
        /// `key = value` file; `preset = "desk"` selects the small defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Extra `key=value` overrides, applied after the file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Render color and depth for every camera of a split.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Discover parts, write the merge trace, the part export and segmentations.
    Parts {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        lattice: usize,
        #[arg(long, default_value_t = 16)]
        n_times: usize,
    },
    /// Render every camera of a split with an edit script applied.
    Edit {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory written by `parts`.
        #[arg(long)]
        parts: PathBuf,
        #[arg(long)]
        script: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare renders (and optionally segmentations) with a dataset.
    Eval {
        /// Directory of `r_XXX.png` renders.
        #[arg(long)]
        renders: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Directory of `seg_XXX.png` label images, scored against `masks/`.
        #[arg(long)]
        segmentation: Option<PathBuf>,
        /// Average IoU per frame instead of accumulating over the sequence.
        #[arg(long)]
        per_frame: bool,
        /// Also write the tables here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct DataArgs {
    /// Dataset root holding `transforms_<split>.json`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "train")]
    split: String,
}

impl DataArgs {
    fn load(&self, background: [f64; 3]) -> Result<Dataset> {
        load_dataset(&self.data, &self.split, background).with_context(|| format!("loading {}", self.data.display()))
    }
}

/// A problem with the invocation rather than with the computation.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn require(path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(Usage(format!("{} does not exist", path.display())).into());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<Usage>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn frame_name(prefix: &str, i: usize) -> String {
    format!("{prefix}_{i:03}.png")
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Gen { scene_spec, out, seed } => {
            let spec = match scene_spec {
                Some(p) => {
                    require(&p)?;
                    SyntheticSceneSpec::load(&p)?
                }
                None => SyntheticSceneSpec::two_body(),
            };
            let scene = generate_synthetic(&spec, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed))?;
            write_synthetic(&out, &scene)?;
            println!("wrote {} frames to {}", scene.dataset.len(), out.display());
        }
        Command::Train {
            data,
            config,
            set,
            out,
            seed,
        } => {
            let mut cfg = match &config {
                Some(p) => {
                    require(p)?;
                    let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                    TrainConfig::parse(&text).map_err(|e| Usage(format!("{}: {e}", p.display())))?
                }
                None => TrainConfig::default(),
            };
            cfg = cfg.with_overrides(&set).map_err(|e| Usage(e.to_string()))?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            require(&data.data)?;
            let dataset = data.load(cfg.background)?;
            create_dir(&out)?;
            fs::write(out.join("config.txt"), cfg.to_text())?;
            let mut log = fs::File::create(out.join("log.tsv"))?;
            writeln!(log, "{}", LossBreakdown::HEADER)?;
            println!("{}", LossBreakdown::HEADER);
            let mut trainer = Trainer::<f32>::new(cfg)?;
            let mut write_err = None;
            trainer.run(&dataset, Some(&out), |l| {
                println!("{}", l.log_line());
                if let Err(e) = writeln!(log, "{}", l.log_line()) {
                    write_err.get_or_insert(e);
                }
            })?;
            if let Some(e) = write_err {
                return Err(e).context("writing log.tsv");
            }
            trainer.save(&out.join("model.ckpt"))?;
        }
        Command::Render { checkpoint, data, out } => {
            let trained = load(&checkpoint)?;
            require(&data.data)?;
            let dataset = data.load(trained.config.background)?;
            create_dir(&out)?;
            let field = ModelField {
                model: &trained.model,
                occupancy: trained.occupancy.as_ref(),
            };
            let opts = trained.config.render_options()?;
            for i in 0..dataset.len() {
                let img = render_image(&field, &dataset.camera(i)?, dataset.frames[i].time, &opts)?;
                write_frame(&out, i, &img, opts.far)?;
            }
            println!("rendered {} frames to {}", dataset.len(), out.display());
        }
        Command::Parts {
            checkpoint,
            data,
            out,
            lattice,
            n_times,
        } => {
            let trained = load(&checkpoint)?;
            require(&data.data)?;
            let dataset = data.load(trained.config.background)?;
            let opts = PartOptions {
                lattice_res: lattice,
                n_times,
                ..PartOptions::default()
            };
            let found = discover_parts(&trained.model, &opts)?;
            create_dir(&out)?;
            fs::write(trace_path(&out), found.trace.to_table())?;
            found.parts.save(&out)?;
            let ropts = trained.config.render_options()?;
            for i in 0..dataset.len() {
                let labels = render_segmentation(
                    &trained.model,
                    &found.parts,
                    trained.occupancy.as_ref(),
                    &dataset.camera(i)?,
                    dataset.frames[i].time,
                    &ropts,
                )?;
                write_segmentation(&out, i, dataset.width, dataset.height, &labels)?;
            }
            println!(
                "{} groups, {} merges kept, {} parts; outputs in {}",
                found.sequences.len(),
                found.trace.stop,
                found.parts.parts.len(),
                out.display()
            );
        }
        Command::Edit {
            checkpoint,
            parts,
            script,
            data,
            out,
        } => {
            let trained = load(&checkpoint)?;
            require(&parts)?;
            require(&script)?;
            let parts = PartModel::load(&parts)?;
            let script = EditScript::load(&script).map_err(|e| Usage(e.to_string()))?;
            script.validate(&parts).map_err(|e| Usage(e.to_string()))?;
            require(&data.data)?;
            let dataset = data.load(trained.config.background)?;
            let base = ModelField {
                model: &trained.model,
                occupancy: trained.occupancy.as_ref(),
            };
            let field = apply_edit(base, &parts, &script)?;
            let opts = trained.config.render_options()?;
            create_dir(&out)?;
            for i in 0..dataset.len() {
                let img = render_edited(&field, &dataset.camera(i)?, dataset.frames[i].time, &opts)?;
                write_frame(&out, i, &img, opts.far)?;
                if let Some(l) = &img.labels {
                    write_segmentation(&out, i, img.width, img.height, l)?;
                }
            }
            println!("rendered {} edited frames to {}", dataset.len(), out.display());
        }
        Command::Eval {
            renders,
            data,
            segmentation,
            per_frame,
            out,
        } => {
            require(&renders)?;
            require(&data.data)?;
            let background = [1.0; 3];
            let dataset = data.load(background)?;
            let mut table = String::from("frame\tpsnr\tssim\n");
            let (mut sp, mut ss) = (0.0, 0.0);
            for (i, f) in dataset.frames.iter().enumerate() {
                let path = renders.join(frame_name("r", i));
                let pred = Image::new(dataset.width, dataset.height, 3, read_png(&path)?.to_rgb(background).concat())
                    .with_context(|| format!("{} does not match the dataset resolution", path.display()))?;
                let gt = Image::new(dataset.width, dataset.height, 3, f.rgb.concat())?;
                let (p, s) = (psnr(&pred, &gt)?, ssim(&pred, &gt)?);
                sp += p;
                ss += s;
                table.push_str(&format!("{i}\t{p:.4}\t{s:.6}\n"));
            }
            let n = dataset.len() as f64;
            table.push_str(&format!("mean\t{:.4}\t{:.6}\n", sp / n, ss / n));
            print!("{table}");
            let mut seg_table = None;
            if let Some(dir) = segmentation {
                require(&dir)?;
                let gt: Vec<Vec<u32>> = load_masks(&data.data, dataset.len())?
                    .into_iter()
                    .map(|m| m.into_iter().map(u32::from).collect())
                    .collect();
                let pred: Vec<Vec<u32>> = (0..dataset.len())
                    .map(|i| -> Result<Vec<u32>> {
                        let (_, _, l) = read_labels(&dir.join(frame_name("seg", i)))?;
                        Ok(l.into_iter().map(u32::from).collect())
                    })
                    .collect::<Result<_>>()?;
                let mode = if per_frame { MiouMode::PerFrame } else { MiouMode::Joint };
                let report = miou(&pred, &gt, mode)?;
                print!("{}", report.to_table());
                seg_table = Some(report.to_table());
            }
            if let Some(o) = out {
                create_dir(&o)?;
                fs::write(o.join("metrics.tsv"), &table)?;
                if let Some(t) = seg_table {
                    fs::write(o.join("miou.tsv"), t)?;
                }
            }
        }
    }
    Ok(())
}

fn load(checkpoint: &Path) -> Result<Trained<f32>> {
    require(checkpoint)?;
    load_model::<f32>(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))
}

/// Color as 8-bit RGB and depth as 16-bit gray scaled by `far`.
fn write_frame(dir: &Path, i: usize, img: &RenderedImage, far: f64) -> Result<()> {
    write_png8(&dir.join(frame_name("r", i)), &Image::from_rgb(img.width, img.height, &img.rgb)?)?;
    let depth: Vec<f32> = img.depth.iter().map(|&d| (d / far) as f32).collect();
    write_png16(&dir.join(frame_name("depth", i)), &Image::new(img.width, img.height, 1, depth)?)?;
    Ok(())
}

/// Raw labels plus a colored preview.
fn write_segmentation(dir: &Path, i: usize, w: usize, h: usize, labels: &[u32]) -> Result<()> {
    let raw: Vec<u8> = labels.iter().map(|&l| l.min(255) as u8).collect();
    write_labels(&dir.join(frame_name("seg", i)), w, h, &raw)?;
    let colors: Vec<[f64; 3]> = labels.iter().map(|&l| label_color(l)).collect();
    write_png8(&dir.join(frame_name("seg_color", i)), &Image::from_rgb(w, h, &colors)?)?;
    Ok(())
}
