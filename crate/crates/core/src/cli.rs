//! Command-line surface: train, reconstruct, eval, ablate.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::amp::PseudoInverse;
use crate::checkpoint;
use crate::error::{CsError, Result};
use crate::eval::{psnr, raster, reconstruct_image, Method, ReconOptions};
use crate::image_io::{read_image, write_image, Image};
use crate::model::{ModelKind, NetConfig, Network};
use crate::sensing::make_gaussian_phi;
use crate::tensor::Tensor;
use crate::train::{train, TrainConfig};

#[derive(Debug, Parser)]
#[command(
    name = "csamp",
    version,
    about = "Block-based compressed sensing: classical AMP and learned unrolled reconstruction"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a reconstruction network on image crops.
    Train(TrainArgs),
    /// Reconstruct images from per-block compressed measurements.
    Reconstruct(ReconstructArgs),
    /// Benchmark PSNR and speed over a dataset at several CS ratios.
    Eval(EvalArgs),
    /// Train and score the model-variant grid at one ratio.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// amp-net or ampa-net.
    #[arg(long)]
    model: String,
    /// CS ratio m_p/n_p in (0,1].
    #[arg(long)]
    ratio: f64,
    /// Directory of PGM/PPM training images.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    /// Stacking depth K.
    #[arg(long, default_value_t = 9)]
    stacks: usize,
    #[arg(long, default_value_t = 0.01)]
    lambda_o: f64,
    /// Default comes from AMP_SEED when set.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 32)]
    channels: usize,
    #[arg(long, default_value_t = 33)]
    block_size: usize,
    /// Training blocks cropped (with replacement) from the corpus.
    #[arg(long, default_value_t = 8912)]
    blocks: usize,
    /// Checkpoint path; the loss CSV lands next to it.
    #[arg(long, default_value = "model.ampck")]
    out: PathBuf,
    /// Also checkpoint every N epochs (0 = final only).
    #[arg(long, default_value_t = 0)]
    ckpt_every: usize,
}

#[derive(Debug, Args)]
struct ReconstructArgs {
    /// amp, amp-net, or ampa-net.
    #[arg(long)]
    method: String,
    #[arg(long)]
    ratio: f64,
    /// Input images (PGM/PPM).
    #[arg(long, required = true, num_args = 1..)]
    input: Vec<PathBuf>,
    /// Checkpoint (required for the learned methods).
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Classical solver iteration cap.
    #[arg(long, default_value_t = 100)]
    iters: usize,
    /// Classical solver threshold scale.
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long)]
    seed: Option<u64>,
    /// Sense with a seeded Gaussian Φ instead of the checkpoint's W_φ.
    #[arg(long)]
    fixed_phi: bool,
    /// Block edge for the classical solver.
    #[arg(long, default_value_t = 33)]
    block_size: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// amp, amp-net, or ampa-net.
    #[arg(long)]
    method: String,
    /// Comma-separated CS ratios.
    #[arg(long, default_value = "0.01,0.04,0.1,0.25,0.4,0.5")]
    ratios: String,
    /// Directory of benchmark images.
    #[arg(long)]
    dataset: PathBuf,
    /// Directory holding one checkpoint per ratio, named
    /// {method}-{ratio}.ampck.
    #[arg(long)]
    ckpt_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    iters: usize,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    fixed_phi: bool,
    #[arg(long, default_value_t = 33)]
    block_size: usize,
    /// Report CSV path.
    #[arg(long, default_value = "eval.csv")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long)]
    ratio: f64,
    /// Training images.
    #[arg(long)]
    corpus: PathBuf,
    /// Scoring images.
    #[arg(long)]
    dataset: PathBuf,
    /// Defaults are the desk-scale miniature; pass full-scale values to
    /// reproduce the full grid.
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 2)]
    stacks: usize,
    #[arg(long, default_value_t = 0.01)]
    lambda_o: f64,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 4)]
    channels: usize,
    #[arg(long, default_value_t = 9)]
    block_size: usize,
    #[arg(long, default_value_t = 200)]
    blocks: usize,
    #[arg(long, default_value_t = 100)]
    iters: usize,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value = "ablation.csv")]
    out: PathBuf,
}

impl Cli {
    pub fn run(self) -> Result<()> {
        match self.command {
            Command::Train(args) => cmd_train(args),
            Command::Reconstruct(args) => cmd_reconstruct(args),
            Command::Eval(args) => cmd_eval(args),
            Command::Ablate(args) => cmd_ablate(args),
        }
    }
}

/// Flag value, else AMP_SEED, else 0.
fn resolve_seed(flag: Option<u64>) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var("AMP_SEED") {
        Ok(text) => text
            .parse()
            .map_err(|_| CsError::parameter(format!("AMP_SEED is not an integer: {text}"))),
        Err(_) => Ok(0),
    }
}

fn parse_model_kind(name: &str) -> Result<ModelKind> {
    match name {
        "amp-net" => Ok(ModelKind::AmpNet),
        "ampa-net" => Ok(ModelKind::AmpaNet),
        other => Err(CsError::parameter(format!(
            "unknown model {other} (want amp-net or ampa-net)"
        ))),
    }
}

/// Sorted (name, image) pairs from a directory of PGM/PPM files.
fn dataset_images(dir: &Path) -> Result<Vec<(String, Image)>> {
    let entries = fs::read_dir(dir)
        .map_err(|e| CsError::data(format!("{}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("pgm") | Some("ppm") | Some("PGM") | Some("PPM")
            )
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CsError::data(format!(
            "{}: no PGM/PPM images found",
            dir.display()
        )));
    }
    paths
        .into_iter()
        .map(|p| {
            let name = p
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or("image")
                .to_string();
            read_image(&p).map(|img| (name, img))
        })
        .collect()
}

/// Seeded random crops (with replacement) of `block`-edge squares from the
/// corpus images' luminance planes.
fn corpus_blocks(dir: &Path, block: usize, count: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let images = dataset_images(dir)?;
    let planes: Vec<Tensor> = images
        .iter()
        .map(|(_, img)| img.to_gray_tensor())
        .collect::<Result<_>>()?;
    let eligible: Vec<&Tensor> = planes
        .iter()
        .filter(|p| p.shape()[0] >= block && p.shape()[1] >= block)
        .collect();
    if eligible.is_empty() {
        return Err(CsError::data(format!(
            "no corpus image is at least {block}x{block}"
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let plane = eligible[rng.gen_range(0..eligible.len())];
        let (h, w) = (plane.shape()[0], plane.shape()[1]);
        let y0 = rng.gen_range(0..=h - block);
        let x0 = rng.gen_range(0..=w - block);
        let mut blk = Vec::with_capacity(block * block);
        for y in y0..y0 + block {
            blk.extend_from_slice(&plane.row(y)[x0..x0 + block]);
        }
        out.push(blk);
    }
    Ok(out)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .map_err(|e| CsError::Io(format!("{}: {e}", parent.display())))?;
        }
    }
    fs::write(path, text).map_err(|e| CsError::Io(format!("{}: {e}", path.display())))
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let kind = parse_model_kind(&args.model)?;
    let seed = resolve_seed(args.seed)?;
    let config = match kind {
        ModelKind::AmpNet => NetConfig::amp_net(args.stacks, args.channels, args.block_size, args.ratio),
        ModelKind::AmpaNet => NetConfig::ampa_net(args.stacks, args.channels, args.block_size, args.ratio),
    };
    let train_cfg = TrainConfig {
        lr: args.lr,
        batch_size: args.batch,
        epochs: args.epochs,
        lambda_o: args.lambda_o,
        eps_charb: 1e-3,
        seed,
    };
    train_cfg.validate()?;

    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .map_err(|e| CsError::Io(format!("{}: {e}", parent.display())))?;
        }
    }
    let corpus = corpus_blocks(&args.corpus, args.block_size, args.blocks, seed)?;
    let mut net = Network::init(config, seed)?;
    println!(
        "training {kind} at ratio {} on {} blocks ({} parameters)",
        args.ratio,
        corpus.len(),
        net.count_parameters()
    );

    let diagnostic = args.out.with_extension("diag.ampck");
    let ckpt_every = args.ckpt_every;
    let out_path = args.out.clone();
    let mut csv = String::from("epoch,L_total,L_R,L_O\n");
    let mut partial = Vec::new();
    let outcome = {
        let csv = &mut csv;
        let partial = &mut partial;
        train(&mut net, &corpus, &train_cfg, Some(&diagnostic), |live, e| {
            println!(
                "epoch {:4}  L_total {:.9}  L_R {:.9}  L_O {:.9}",
                e.epoch, e.total, e.recon, e.ortho
            );
            let _ = writeln!(csv, "{},{:.9},{:.9},{:.9}", e.epoch, e.total, e.recon, e.ortho);
            partial.push(*e);
            if ckpt_every > 0 && e.epoch % ckpt_every == 0 && e.epoch < args.epochs {
                let path = out_path.with_extension(format!("epoch{}.ampck", e.epoch));
                match checkpoint::save(&path, live, None, e.epoch, partial) {
                    Ok(()) => println!("wrote {}", path.display()),
                    Err(err) => eprintln!("warning: interim checkpoint failed: {err}"),
                }
            }
        })?
    };

    checkpoint::save(
        &args.out,
        &net,
        Some(&outcome.optimizer),
        args.epochs,
        &outcome.history,
    )?;
    write_text(&args.out.with_extension("loss.csv"), &csv)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn load_net_for(method: Method, ckpt: Option<&Path>, ratio: f64) -> Result<Option<Network>> {
    match method {
        Method::Amp => Ok(None),
        Method::AmpNet | Method::AmpaNet => {
            let path = ckpt.ok_or_else(|| {
                CsError::parameter(format!("method {method} requires --ckpt"))
            })?;
            let loaded = checkpoint::load(path)?;
            let expect = match method {
                Method::AmpNet => ModelKind::AmpNet,
                _ => ModelKind::AmpaNet,
            };
            if loaded.net.config.kind != expect {
                return Err(CsError::parameter(format!(
                    "checkpoint holds {}, method asks for {method}",
                    loaded.net.config.kind
                )));
            }
            if (loaded.net.config.ratio - ratio).abs() > 1e-12 {
                return Err(CsError::parameter(format!(
                    "checkpoint was trained at ratio {}, requested {ratio}",
                    loaded.net.config.ratio
                )));
            }
            Ok(Some(loaded.net))
        }
    }
}

fn cmd_reconstruct(args: ReconstructArgs) -> Result<()> {
    let method: Method = args.method.parse()?;
    let seed = resolve_seed(args.seed)?;
    let mut net = load_net_for(method, args.ckpt.as_deref(), args.ratio)?;
    let opts = ReconOptions {
        ratio: args.ratio,
        block: args.block_size,
        seed,
        iters: args.iters,
        alpha: args.alpha,
        fixed_phi: args.fixed_phi,
    };
    fs::create_dir_all(&args.out)
        .map_err(|e| CsError::Io(format!("{}: {e}", args.out.display())))?;

    for input in &args.input {
        let img = read_image(input)?;
        let (rec, report) = reconstruct_image(&img, method, net.as_mut(), &opts)?;
        let stem = input
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("image");
        let ext = match rec {
            Image::Gray { .. } => "pgm",
            Image::Rgb { .. } => "ppm",
        };
        let out = args.out.join(format!("{stem}.{ext}"));
        write_image(&out, &rec)?;
        if report.diverged > 0 {
            eprintln!(
                "warning: {}: {}/{} blocks diverged, pseudo-inverse fallback used",
                input.display(),
                report.diverged,
                report.blocks
            );
        }
        println!("wrote {} ({} blocks)", out.display(), report.blocks);
    }
    Ok(())
}

fn parse_ratios(text: &str) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for part in text.split(',') {
        let r: f64 = part
            .trim()
            .parse()
            .map_err(|_| CsError::parameter(format!("bad ratio {part}")))?;
        if !(0.0..=1.0).contains(&r) || r == 0.0 {
            return Err(CsError::parameter(format!("ratio {r} outside (0,1]")));
        }
        out.push(r);
    }
    if out.is_empty() {
        return Err(CsError::parameter("no ratios given"));
    }
    Ok(out)
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let method: Method = args.method.parse()?;
    let seed = resolve_seed(args.seed)?;
    let ratios = parse_ratios(&args.ratios)?;
    let images = dataset_images(&args.dataset)?;

    let mut csv = String::from("image,ratio,psnr_db,seconds\n");
    let mut missing = Vec::new();
    println!("{:<24} {:>6} {:>10} {:>10}", "image", "ratio", "psnr_db", "seconds");
    for &ratio in &ratios {
        let mut net = match method {
            Method::Amp => None,
            _ => {
                let dir = args.ckpt_dir.as_deref().ok_or_else(|| {
                    CsError::parameter(format!("method {method} requires --ckpt-dir"))
                })?;
                let path = dir.join(format!("{method}-{ratio}.ampck"));
                if !path.exists() {
                    eprintln!("missing checkpoint {}, skipping ratio {ratio}", path.display());
                    missing.push(path);
                    continue;
                }
                Some(load_net_for(method, Some(&path), ratio)?.expect("learned method"))
            }
        };
        let opts = ReconOptions {
            ratio,
            block: args.block_size,
            seed,
            iters: args.iters,
            alpha: args.alpha,
            fixed_phi: args.fixed_phi,
        };

        let mut finite = Vec::new();
        let mut sec_sum = 0.0;
        for (name, img) in &images {
            let start = Instant::now();
            let (rec, report) = reconstruct_image(img, method, net.as_mut(), &opts)?;
            let seconds = start.elapsed().as_secs_f64();
            let db = psnr(raster(img), raster(&rec), 255.0)?;
            if report.diverged > 0 {
                eprintln!(
                    "warning: {name} at ratio {ratio}: {}/{} blocks diverged, pseudo-inverse fallback used",
                    report.diverged, report.blocks
                );
            }
            if db.is_finite() {
                finite.push(db);
            } else {
                eprintln!("warning: {name} at ratio {ratio}: infinite PSNR excluded from the mean");
            }
            sec_sum += seconds;
            let console = if db.is_finite() {
                format!("{db:.4}")
            } else {
                "inf".to_string()
            };
            println!("{name:<24} {ratio:>6} {console:>10} {seconds:>10.4}");
            // Full round-trip precision so means recompute exactly from rows.
            let _ = writeln!(csv, "{name},{ratio},{db},{seconds:.6}");
        }
        let mean = if finite.is_empty() {
            f64::NAN
        } else {
            finite.iter().sum::<f64>() / finite.len() as f64
        };
        let mean_sec = sec_sum / images.len() as f64;
        println!("{:<24} {ratio:>6} {mean:>10.4} {mean_sec:>10.4}", "mean");
        let _ = writeln!(csv, "mean,{ratio},{mean},{mean_sec:.6}");
    }
    write_text(&args.out, &csv)?;
    println!("wrote {}", args.out.display());
    if !missing.is_empty() {
        return Err(CsError::data(format!(
            "{} ratio(s) skipped for missing checkpoints",
            missing.len()
        )));
    }
    Ok(())
}

/// Pseudo-inverse of Φ as an [n x m] matrix.
fn pinv_matrix(phi: &Tensor) -> Result<Tensor> {
    let (m, n) = (phi.shape()[0], phi.shape()[1]);
    let pinv = PseudoInverse::new(phi)?;
    let mut data = vec![0.0; n * m];
    for j in 0..m {
        let mut e = vec![0.0; m];
        e[j] = 1.0;
        let col = pinv.apply(&Tensor::from_vec(&[m], e)?)?;
        for i in 0..n {
            data[i * m + j] = col.data()[i];
        }
    }
    Tensor::from_vec(&[n, m], data)
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let seed = resolve_seed(args.seed)?;
    let corpus = corpus_blocks(&args.corpus, args.block_size, args.blocks, seed)?;
    let images = dataset_images(&args.dataset)?;
    let train_cfg = TrainConfig {
        lr: args.lr,
        batch_size: args.batch,
        epochs: args.epochs,
        lambda_o: args.lambda_o,
        eps_charb: 1e-3,
        seed,
    };
    train_cfg.validate()?;
    let n_p = args.block_size * args.block_size;

    let amp_base = NetConfig::amp_net(args.stacks, args.channels, args.block_size, args.ratio);
    let ampa_base = NetConfig::ampa_net(args.stacks, args.channels, args.block_size, args.ratio);

    // Variant name -> (config, fixed sensing, pinv-frozen W_Q).
    let mut variants: Vec<(&str, NetConfig, bool, bool)> = vec![
        ("amp-net", amp_base, false, false),
        ("amp-net-fixed-phi", amp_base, true, false),
        (
            "cnn-only",
            NetConfig {
                stages: 1,
                amp_recurrence: false,
                ..amp_base
            },
            true,
            true,
        ),
        ("ampa-net", ampa_base, false, false),
        (
            "ampa-net-no-init",
            NetConfig {
                init_attention: false,
                ..ampa_base
            },
            false,
            false,
        ),
        (
            "ampa-net-no-channel",
            NetConfig {
                channel_attention: false,
                ..ampa_base
            },
            false,
            false,
        ),
        (
            "ampa-net-no-spatial",
            NetConfig {
                spatial_attention: false,
                ..ampa_base
            },
            false,
            false,
        ),
        (
            "ampa-net-plain",
            NetConfig {
                init_attention: false,
                channel_attention: false,
                spatial_attention: false,
                ..ampa_base
            },
            false,
            false,
        ),
    ];
    variants.sort_by_key(|v| v.0);

    let mut rows: BTreeMap<String, f64> = BTreeMap::new();

    // Classical baseline first.
    {
        let opts = ReconOptions {
            ratio: args.ratio,
            block: args.block_size,
            seed,
            iters: args.iters,
            alpha: args.alpha,
            fixed_phi: false,
        };
        rows.insert("amp".into(), mean_psnr(&images, Method::Amp, None, &opts)?);
    }

    for (name, config, fixed_phi, pinv_wq) in variants {
        let mut net = Network::init(config, seed)?;
        if fixed_phi {
            let sys = make_gaussian_phi(args.ratio, n_p, seed)?;
            if pinv_wq {
                net.set_param("w_q", pinv_matrix(&sys.phi)?)?;
                net.freeze("w_q")?;
            }
            net.set_param("w_phi", sys.phi)?;
            net.freeze("w_phi")?;
        }
        train(&mut net, &corpus, &train_cfg, None, |_, _| {})?;
        let method = match config.kind {
            ModelKind::AmpNet => Method::AmpNet,
            ModelKind::AmpaNet => Method::AmpaNet,
        };
        let opts = ReconOptions {
            ratio: args.ratio,
            block: args.block_size,
            seed,
            iters: args.iters,
            alpha: args.alpha,
            fixed_phi: false,
        };
        let db = mean_psnr(&images, method, Some(&mut net), &opts)?;
        println!("{name:<22} {db:.4} dB");
        rows.insert(name.into(), db);
    }

    let mut csv = String::from("variant,ratio,psnr_db\n");
    for (name, db) in &rows {
        let _ = writeln!(csv, "{name},{},{db:.4}", args.ratio);
    }
    write_text(&args.out, &csv)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn mean_psnr(
    images: &[(String, Image)],
    method: Method,
    mut net: Option<&mut Network>,
    opts: &ReconOptions,
) -> Result<f64> {
    let mut finite = Vec::new();
    for (name, img) in images {
        let (rec, _) = reconstruct_image(img, method, net.as_deref_mut(), opts)?;
        let db = psnr(raster(img), raster(&rec), 255.0)?;
        if db.is_finite() {
            finite.push(db);
        } else {
            eprintln!("warning: {name}: infinite PSNR excluded from the mean");
        }
    }
    if finite.is_empty() {
        return Err(CsError::data("every image scored an infinite PSNR"));
    }
    Ok(finite.iter().sum::<f64>() / finite.len() as f64)
}

/// Exit code for a failed run: 2 usage, 3 data/io, 4 numeric.
pub fn exit_code(err: &CsError) -> i32 {
    match err {
        CsError::Parameter(_) => 2,
        CsError::Data(_) | CsError::Io(_) => 3,
        _ => 4,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::synthetic_image_u8;

    fn temp_dir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("csamp-cli-{tag}"));
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn write_gray(path: &Path, w: usize, h: usize, seed: u64) {
        let img = Image::Gray {
            width: w,
            height: h,
            pixels: synthetic_image_u8(h, w, seed),
        };
        write_image(path, &img).unwrap();
    }

    #[test]
    fn seed_flag_beats_environment() {
        assert_eq!(resolve_seed(Some(7)).unwrap(), 7);
        assert_eq!(resolve_seed(None).unwrap(), 0);
        std::env::set_var("AMP_SEED", "41");
        assert_eq!(resolve_seed(Some(7)).unwrap(), 7);
        assert_eq!(resolve_seed(None).unwrap(), 41);
        std::env::set_var("AMP_SEED", "nope");
        assert!(matches!(resolve_seed(None), Err(CsError::Parameter(_))));
        std::env::remove_var("AMP_SEED");
    }

    #[test]
    fn ratio_list_parses_and_rejects_junk() {
        assert_eq!(parse_ratios("0.25").unwrap(), vec![0.25]);
        assert_eq!(
            parse_ratios("0.01, 0.5,1.0").unwrap(),
            vec![0.01, 0.5, 1.0]
        );
        assert!(parse_ratios("0.2,fast").is_err());
        assert!(parse_ratios("0").is_err());
        assert!(parse_ratios("1.5").is_err());
        assert!(parse_ratios("").is_err());
    }

    #[test]
    fn model_names_resolve() {
        assert_eq!(parse_model_kind("amp-net").unwrap(), ModelKind::AmpNet);
        assert_eq!(parse_model_kind("ampa-net").unwrap(), ModelKind::AmpaNet);
        assert!(parse_model_kind("amp").is_err());
    }

    #[test]
    fn dataset_listing_is_sorted_and_filtered() {
        let dir = temp_dir("dataset");
        write_gray(&dir.join("b.pgm"), 12, 10, 1);
        write_gray(&dir.join("a.pgm"), 8, 8, 2);
        fs::write(dir.join("notes.txt"), "skip me").unwrap();
        let images = dataset_images(&dir).unwrap();
        let names: Vec<&str> = images.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["a.pgm", "b.pgm"]);

        let empty = temp_dir("dataset-empty");
        assert!(matches!(dataset_images(&empty), Err(CsError::Data(_))));
    }

    #[test]
    fn corpus_crops_are_seeded_and_sized() {
        let dir = temp_dir("corpus");
        write_gray(&dir.join("one.pgm"), 20, 16, 3);
        write_gray(&dir.join("tiny.pgm"), 4, 4, 4);
        let a = corpus_blocks(&dir, 9, 12, 5).unwrap();
        let b = corpus_blocks(&dir, 9, 12, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 12);
        assert!(a.iter().all(|blk| blk.len() == 81));
        assert!(a.iter().all(|blk| blk.iter().all(|&v| (0.0..=1.0).contains(&v))));
        assert_ne!(corpus_blocks(&dir, 9, 12, 6).unwrap(), a);

        // Only the 4x4 image fits nothing at block 9.
        let small = temp_dir("corpus-small");
        write_gray(&small.join("tiny.pgm"), 4, 4, 4);
        assert!(matches!(
            corpus_blocks(&small, 9, 4, 0),
            Err(CsError::Data(_))
        ));
    }

    #[test]
    fn pinv_matrix_inverts_measurement() {
        let phi = Tensor::from_vec(&[2, 4], vec![1.0, 0.0, 1.0, 0.0, 0.5, 1.0, 0.0, -1.0]).unwrap();
        let wq = pinv_matrix(&phi).unwrap();
        assert_eq!(wq.shape(), &[4, 2]);
        // Φ · pinv(Φ) = I for full row rank Φ.
        for i in 0..2 {
            for j in 0..2 {
                let mut dot = 0.0;
                for k in 0..4 {
                    dot += phi.data()[i * 4 + k] * wq.data()[k * 2 + j];
                }
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-10, "({i},{j}) = {dot}");
            }
        }
    }

    mod csv_round_trip {
        use proptest::prelude::*;

        proptest! {
            // psnr_db cells are written with the shortest round-trip float
            // format, so a reader recovers the exact value; this is what
            // lets mean rows be recomputed from data rows losslessly.
            #[test]
            fn float_cells_parse_back_bitwise(v in proptest::num::f64::NORMAL) {
                let cell = format!("{v}");
                let back: f64 = cell.parse().unwrap();
                prop_assert_eq!(back.to_bits(), v.to_bits());
            }

            #[test]
            fn rows_split_back_to_their_fields(
                fields in proptest::collection::vec("[a-zA-Z0-9_. -]{1,12}", 1..6)
            ) {
                let line = fields.join(",");
                let back: Vec<&str> = line.split(',').collect();
                prop_assert_eq!(back, fields.iter().map(|s| s.as_str()).collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn exit_codes_partition_error_kinds() {
        assert_eq!(exit_code(&CsError::parameter("x")), 2);
        assert_eq!(exit_code(&CsError::data("x")), 3);
        assert_eq!(exit_code(&CsError::Io("x".into())), 3);
        assert_eq!(exit_code(&CsError::Numeric("x".into())), 4);
        assert_eq!(
            exit_code(&CsError::Divergence {
                message: "x".into(),
                residual_norms: vec![2.0],
            }),
            4
        );
    }
}
