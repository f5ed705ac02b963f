//! Command-line surface: GP completion, greedy pixel selection, field
//! fitting, calibration curves, bundle adjustment, two-frame photometric
//! alignment, and synthetic scene rendering. Exit codes: 0 success, 1 usage
//! or configuration, 2 data or format, 3 numerical failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::exit;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use nalgebra::DVector;

use depthcov::ba::{self, BaProblem, FramePrior};
use depthcov::calib::{block_mahalanobis, calibration_curve};
use depthcov::error::{Error, Result};
use depthcov::fit::fit_field;
use depthcov::geometry::{Intrinsics, Pose};
use depthcov::gp::{condition, CovRequest, LogDepthObservations, Posterior, PosteriorCov};
use depthcov::io::config::Config;
use depthcov::io::pfm::{read_pfm, write_pfm, FloatRaster};
use depthcov::io::tables;
use depthcov::kernel::{KernelField, NormalizedCoord};
use depthcov::photo::{two_frame_solve, IntensityImage};
use depthcov::select::{greedy_select, grid_candidates, StopRule};
use depthcov::synth::{render_scene, SceneSpec};

#[derive(Parser)]
#[command(name = "depthcov", version, about = "Depth covariance field toolkit")]
struct Cli {
    /// JSON configuration; missing keys take documented defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the seeds in the configuration and in scene specs.
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<u64>,
    /// Worker threads; defaults to the logical CPU count.
    #[arg(long, global = true, value_name = "INT")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Condition the GP on sparse observations; write posterior rasters.
    Complete {
        /// 3-channel kernel field PFM; its dims set the raster dims.
        #[arg(long)]
        field: PathBuf,
        /// CSV `u,v,log_depth`; may have zero rows.
        #[arg(long)]
        observations: PathBuf,
        /// Prior mean log-depth; defaults to the observation mean (0 when
        /// there are no observations).
        #[arg(long)]
        scale: Option<f64>,
        /// Output PFM of posterior mean log-depth.
        #[arg(long)]
        mean_out: PathBuf,
        /// Optional output PFM of posterior variance.
        #[arg(long)]
        var_out: Option<PathBuf>,
    },
    /// Greedily pick the highest-variance pixels of a kernel field.
    Select {
        #[arg(long)]
        field: PathBuf,
        /// Number of pixels to select; 0 emits only the CSV header.
        #[arg(long)]
        count: usize,
        /// Output CSV `step,u,v,variance_before`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a kernel field and hyperparameters to observations of one image.
    Fit {
        /// CSV `u,v,log_depth` with pixel coordinates in a width x height image.
        #[arg(long)]
        observations: PathBuf,
        #[arg(long)]
        width: usize,
        #[arg(long)]
        height: usize,
        /// Output 3-channel PFM of the fitted field at width x height.
        #[arg(long)]
        field_out: PathBuf,
        /// Output JSON `{sigma_f_sq, sigma_n_sq, m, loss_trace}`.
        #[arg(long)]
        report_out: PathBuf,
    },
    /// Coverage of held-out observations under block-diagonal posteriors.
    Calibrate {
        #[arg(long)]
        field: PathBuf,
        /// Conditioning observations CSV `u,v,log_depth`.
        #[arg(long)]
        train: PathBuf,
        /// Held-out observations CSV `u,v,log_depth`.
        #[arg(long)]
        test: PathBuf,
        /// Block dimensions to evaluate.
        #[arg(long, value_delimiter = ',', default_value = "1,4,16")]
        block_dims: Vec<usize>,
        /// Output CSV `p_expected,p_observed,block_dim`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Windowed bundle adjustment with per-frame GP depth priors.
    Ba {
        /// CSV `frame,landmark_id,u,v`.
        #[arg(long)]
        tracks: PathBuf,
        /// Initial camera-from-world poses CSV `frame,tx,ty,tz,qx,qy,qz,qw`.
        #[arg(long)]
        poses: PathBuf,
        /// JSON `{fx, fy, cx, cy, width, height}`.
        #[arg(long)]
        intrinsics: PathBuf,
        /// Kernel field PFMs, one per frame or a single shared one.
        #[arg(long, num_args = 1.., value_delimiter = ',')]
        fields: Vec<PathBuf>,
        /// Receives poses.csv, landmarks.csv, trace.csv, and per-frame
        /// depth_mean_NNNN.pfm / depth_var_NNNN.pfm log-depth rasters.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Two-frame photometric pose and depth recovery.
    TwoFrame {
        /// Grayscale PFM or PNG of the reference frame.
        #[arg(long)]
        image0: PathBuf,
        /// Grayscale PFM or PNG of the second frame.
        #[arg(long)]
        image1: PathBuf,
        /// Kernel field PFM of the reference frame.
        #[arg(long)]
        field: PathBuf,
        /// JSON `{fx, fy, cx, cy, width, height}`.
        #[arg(long)]
        intrinsics: PathBuf,
        /// Receives poses.csv, inducing.csv, depth_mean.pfm, trace.csv.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Render a synthetic scene spec to rasters, poses, and tracks.
    Synth {
        /// Scene JSON: camera, trajectory, primitives, texture, tracks, seed.
        #[arg(long)]
        spec: PathBuf,
        /// Receives image_NNNN.pfm, depth_NNNN.pfm, poses.csv, tracks.csv,
        /// landmarks.csv.
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn main() {
    env_logger::init();
    let cli = Cli::try_parse().unwrap_or_else(|e| {
        let usage_ok = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
        let _ = e.print();
        exit(if usage_ok { 0 } else { 1 });
    });
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("error: cannot size the worker pool: {e}");
            exit(1);
        }
    }
    if let Err(e) = run(&cli) {
        eprintln!("error: {e}");
        let mut source = std::error::Error::source(&e);
        while let Some(s) = source {
            eprintln!("  caused by: {s}");
            source = s.source();
        }
        exit(e.exit_code());
    }
}

fn run(cli: &Cli) -> Result<()> {
    let config = Config::load(cli.config.as_deref())?;
    match &cli.command {
        Command::Complete { field, observations, scale, mean_out, var_out } => {
            run_complete(&config, field, observations, *scale, mean_out, var_out.as_deref())
        }
        Command::Select { field, count, out } => run_select(&config, field, *count, out),
        Command::Fit { observations, width, height, field_out, report_out } => {
            run_fit(&config, cli.seed, observations, *width, *height, field_out, report_out)
        }
        Command::Calibrate { field, train, test, block_dims, out } => {
            run_calibrate(&config, field, train, test, block_dims, out)
        }
        Command::Ba { tracks, poses, intrinsics, fields, out_dir } => {
            run_ba(&config, tracks, poses, intrinsics, fields, out_dir)
        }
        Command::TwoFrame { image0, image1, field, intrinsics, out_dir } => {
            run_two_frame(&config, image0, image1, field, intrinsics, out_dir)
        }
        Command::Synth { spec, out_dir } => run_synth(cli.seed, spec, out_dir),
    }
}

fn read_field(path: &Path) -> Result<KernelField> {
    read_pfm(path)?.to_field()
}

fn read_intrinsics(path: &Path) -> Result<Intrinsics> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: Intrinsics = serde_json::from_str(&text)
        .map_err(|e| Error::format(path, e.to_string(), 0))?;
    Intrinsics::new(raw.fx, raw.fy, raw.cx, raw.cy, raw.width, raw.height)
}

/// Loads a grayscale image as intensities in [0, 1]: single-channel PFM, or
/// PNG converted to 16-bit luma.
fn read_image(path: &Path) -> Result<IntensityImage> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    let (width, height, data) = match ext.to_ascii_lowercase().as_str() {
        "pfm" => {
            let raster = read_pfm(path)?;
            (raster.width(), raster.height(), raster.to_scalar()?)
        }
        "png" => {
            let img = image::open(path)
                .map_err(|e| Error::format(path, e.to_string(), 0))?
                .to_luma16();
            let (w, h) = (img.width() as usize, img.height() as usize);
            let data = img.into_raw().iter().map(|&v| f64::from(v) / 65535.0).collect();
            (w, h, data)
        }
        other => {
            return Err(Error::Config(format!(
                "unsupported image extension {other:?} on {}; expected pfm or png",
                path.display()
            )))
        }
    };
    IntensityImage::new(width, height, data)
}

/// Reads `u,v,log_depth` rows into observations normalized against the given
/// raster dimensions.
fn read_obs(path: &Path, width: usize, height: usize) -> Result<LogDepthObservations> {
    let rows = tables::read_observations(path)?;
    if rows.is_empty() {
        return Ok(LogDepthObservations::empty());
    }
    let coords = rows
        .iter()
        .map(|r| NormalizedCoord::from_pixel(r.u, r.v, width, height))
        .collect::<Result<Vec<_>>>()?;
    let y = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.log_depth));
    LogDepthObservations::new(coords, y)
}

fn run_complete(
    config: &Config,
    field_path: &Path,
    observations: &Path,
    scale: Option<f64>,
    mean_out: &Path,
    var_out: Option<&Path>,
) -> Result<()> {
    let field = read_field(field_path)?;
    let hyper = config.hyperparams.build()?;
    let (w, h) = (field.width(), field.height());
    let obs = read_obs(observations, w, h)?;
    let m = scale.unwrap_or_else(|| obs.mean_y());
    let query = grid_candidates(w, h, 1)?;
    let posterior = condition(&obs, m, &query, &field, &hyper, CovRequest::Diag)?;
    write_pfm(mean_out, &FloatRaster::from_scalar(w, h, posterior.mean.as_slice())?)?;
    if let Some(var_out) = var_out {
        let PosteriorCov::Diag(var) = &posterior.cov else { unreachable!("diagonal requested") };
        write_pfm(var_out, &FloatRaster::from_scalar(w, h, var.as_slice())?)?;
    }
    println!(
        "conditioned on {} observations at scale {m}; wrote {w}x{h} posterior",
        obs.len()
    );
    Ok(())
}

fn run_select(config: &Config, field_path: &Path, count: usize, out: &Path) -> Result<()> {
    let field = read_field(field_path)?;
    let hyper = config.hyperparams.build()?;
    let (w, h) = (field.width(), field.height());
    let stride = config.selection.stride;
    let candidates = grid_candidates(w, h, stride)?;
    let selection = greedy_select(&field, &hyper, &candidates, StopRule::Count(count))?;
    // Candidates are exact pixel centers of the strided grid; recover integer
    // pixels from the row-major index rather than a lossy normalized round trip.
    let cols = w.div_ceil(stride);
    let rows: Vec<tables::SelectionRow> = selection
        .order
        .iter()
        .zip(&selection.variance_before)
        .enumerate()
        .map(|(step, (&idx, &variance_before))| tables::SelectionRow {
            step,
            u: ((idx % cols) * stride) as f64,
            v: ((idx / cols) * stride) as f64,
            variance_before,
        })
        .collect();
    tables::write_selection(out, &rows)?;
    println!("selected {count} of {} candidates", candidates.len());
    Ok(())
}

#[derive(serde::Serialize)]
struct FitReport<'a> {
    sigma_f_sq: f64,
    sigma_n_sq: f64,
    m: f64,
    loss_trace: &'a [f64],
}

fn run_fit(
    config: &Config,
    seed: Option<u64>,
    observations: &Path,
    width: usize,
    height: usize,
    field_out: &Path,
    report_out: &Path,
) -> Result<()> {
    let obs = read_obs(observations, width, height)?;
    let mut solver = config.fit.solver();
    if let Some(seed) = seed {
        solver.seed = seed;
    }
    let result = fit_field(
        &obs,
        config.fit.grid_width,
        config.fit.grid_height,
        config.hyperparams.nu,
        &solver,
    )?;
    let field = result.grid.upsample(width, height)?;
    write_pfm(field_out, &FloatRaster::from_field(&field))?;
    let report = FitReport {
        sigma_f_sq: result.hyper.sigma_f_sq(),
        sigma_n_sq: result.hyper.sigma_n_sq(),
        m: result.m,
        loss_trace: &result.loss_trace,
    };
    let text = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Config(format!("cannot encode fit report: {e}")))?;
    fs::write(report_out, text).map_err(|e| Error::io(report_out, e))?;
    println!(
        "fitted {}x{} grid in {} accepted steps; final loss {:.6}",
        config.fit.grid_width,
        config.fit.grid_height,
        result.loss_trace.len() - 1,
        result.loss_trace.last().expect("nonempty trace")
    );
    Ok(())
}

/// Observation-noise-adjusted predictive blocks: held-out observations carry
/// noise on top of the latent posterior, so each block gains sigma_n^2 on its
/// diagonal before the Mahalanobis solve.
fn add_noise_to_blocks(posterior: &mut Posterior, sigma_n_sq: f64) {
    if let PosteriorCov::Block { blocks, .. } = &mut posterior.cov {
        for block in blocks {
            for i in 0..block.nrows() {
                block[(i, i)] += sigma_n_sq;
            }
        }
    }
}

fn run_calibrate(
    config: &Config,
    field_path: &Path,
    train: &Path,
    test: &Path,
    block_dims: &[usize],
    out: &Path,
) -> Result<()> {
    let field = read_field(field_path)?;
    let hyper = config.hyperparams.build()?;
    let (w, h) = (field.width(), field.height());
    let train_obs = read_obs(train, w, h)?;
    let test_obs = read_obs(test, w, h)?;
    if test_obs.is_empty() {
        return Err(Error::Degenerate("calibration needs held-out observations".into()));
    }

    // Blocks follow the active-selection ordering of the held-out points so
    // each block groups spatially informative neighbors.
    let selection =
        greedy_select(&field, &hyper, test_obs.coords(), StopRule::Count(test_obs.len()))?;
    let coords: Vec<NormalizedCoord> =
        selection.order.iter().map(|&i| test_obs.coords()[i]).collect();
    let y: Vec<f64> = selection.order.iter().map(|&i| test_obs.y()[i]).collect();

    let m = train_obs.mean_y();
    let levels: Vec<f64> = (1..20).map(|i| i as f64 * 0.05).collect();
    let mut rows = Vec::new();
    for &dim in block_dims {
        let mut posterior =
            condition(&train_obs, m, &coords, &field, &hyper, CovRequest::Block(dim))?;
        add_noise_to_blocks(&mut posterior, hyper.sigma_n_sq());
        let residuals: Vec<f64> =
            y.iter().zip(posterior.mean.iter()).map(|(yi, mi)| yi - mi).collect();
        let distances = block_mahalanobis(&residuals, &posterior)?;
        let full: Vec<f64> =
            distances.iter().filter(|b| b.dim == dim).map(|b| b.d_sq).collect();
        let curve = calibration_curve(&full, dim, &levels)?;
        rows.extend(curve.points.iter().map(|&(p_expected, p_observed)| {
            tables::CalibrationRow { p_expected, p_observed, block_dim: dim }
        }));
        println!(
            "block dim {dim}: {} full blocks, mean |observed - expected| {:.4}",
            full.len(),
            curve.mean_abs_deviation()
        );
    }
    tables::write_calibration(out, &rows)
}

/// Poses CSV rows must cover frames 0..n exactly once each.
fn contiguous_poses(path: &Path) -> Result<Vec<Pose>> {
    let mut rows = tables::read_poses(path)?;
    rows.sort_by_key(|&(frame, _)| frame);
    for (expect, &(frame, _)) in rows.iter().enumerate() {
        if frame != expect {
            return Err(Error::format(
                path,
                format!("pose frames must be 0..n without gaps; found frame {frame} at row {expect}"),
                0,
            ));
        }
    }
    Ok(rows.into_iter().map(|(_, pose)| pose).collect())
}

fn run_ba(
    config: &Config,
    tracks: &Path,
    poses: &Path,
    intrinsics: &Path,
    fields: &[PathBuf],
    out_dir: &Path,
) -> Result<()> {
    let k = read_intrinsics(intrinsics)?;
    let hyper = config.hyperparams.build()?;
    let initial_poses = contiguous_poses(poses)?;
    let n_frames = initial_poses.len();
    let field_list: Vec<KernelField> = match fields {
        [shared] => vec![read_field(shared)?; n_frames],
        many if many.len() == n_frames => {
            many.iter().map(|p| read_field(p)).collect::<Result<_>>()?
        }
        many => {
            return Err(Error::Config(format!(
                "{} field rasters for {n_frames} frames; pass one per frame or a single shared one",
                many.len()
            )))
        }
    };
    let priors: Vec<FramePrior> =
        field_list.into_iter().map(|field| FramePrior { field, hyper }).collect();

    let track_rows = tables::read_tracks(tracks)?;
    let prepared = ba::prepare_tracks(&k, &track_rows, n_frames, config.lm.sigma_r)?;
    let landmarks =
        ba::triangulate_midpoint(&k, &initial_poses, &prepared.measurements, prepared.landmark_ids.len())?;
    let mut problem = BaProblem::new(k, initial_poses, landmarks, prepared.measurements, priors)?;
    let state = ba::lm_optimize(&mut problem, &config.lm)?;

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    tables::write_poses(&out_dir.join("poses.csv"), problem.poses().iter().enumerate())?;
    tables::write_landmarks(
        &out_dir.join("landmarks.csv"),
        prepared.landmark_ids.iter().copied().zip(problem.landmarks()),
    )?;
    tables::write_trace(&out_dir.join("trace.csv"), &state.cost_trace)?;
    for frame in 0..n_frames {
        let dense = ba::densify(&problem, frame, k.width, k.height)?;
        write_pfm(
            &out_dir.join(format!("depth_mean_{frame:04}.pfm")),
            &FloatRaster::from_scalar(k.width, k.height, &dense.mean)?,
        )?;
        write_pfm(
            &out_dir.join(format!("depth_var_{frame:04}.pfm")),
            &FloatRaster::from_scalar(k.width, k.height, &dense.variance)?,
        )?;
    }
    println!(
        "{} accepted steps (converged: {}); final cost {:.6e}; mean reprojection {:.3e} px",
        state.iterations,
        state.converged,
        state.cost_trace.last().expect("nonempty trace"),
        problem.mean_reprojection_error()
    );
    Ok(())
}

fn run_two_frame(
    config: &Config,
    image0: &Path,
    image1: &Path,
    field_path: &Path,
    intrinsics: &Path,
    out_dir: &Path,
) -> Result<()> {
    let i0 = read_image(image0)?;
    let i1 = read_image(image1)?;
    let field = read_field(field_path)?;
    let hyper = config.hyperparams.build()?;
    let k = read_intrinsics(intrinsics)?;
    let result = two_frame_solve(&i0, &i1, &field, &hyper, &k, &config.photo)?;

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let identity = Pose::identity();
    tables::write_poses(&out_dir.join("poses.csv"), [(0, &identity), (1, &result.pose)])?;
    let inducing_rows: Vec<tables::PixelObservation> = result
        .inducing_pixels
        .iter()
        .zip(result.y.iter())
        .map(|(px, &log_depth)| tables::PixelObservation { u: px.x, v: px.y, log_depth })
        .collect();
    tables::write_observations(&out_dir.join("inducing.csv"), &inducing_rows)?;
    tables::write_level_traces(&out_dir.join("trace.csv"), &result.cost_traces)?;

    let obs = LogDepthObservations::new(result.inducing.clone(), result.y.clone())?;
    let query = grid_candidates(k.width, k.height, 1)?;
    let posterior = condition(&obs, result.m, &query, &field, &hyper, CovRequest::Diag)?;
    write_pfm(
        &out_dir.join("depth_mean.pfm"),
        &FloatRaster::from_scalar(k.width, k.height, posterior.mean.as_slice())?,
    )?;
    println!(
        "two-frame solve converged: {}; translation [{:.6}, {:.6}, {:.6}]",
        result.converged,
        result.pose.translation().x,
        result.pose.translation().y,
        result.pose.translation().z
    );
    Ok(())
}

fn run_synth(seed: Option<u64>, spec_path: &Path, out_dir: &Path) -> Result<()> {
    let text = fs::read_to_string(spec_path).map_err(|e| Error::io(spec_path, e))?;
    let mut spec: SceneSpec =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!(
            "bad scene spec {}:{}:{}: {e}",
            spec_path.display(),
            e.line(),
            e.column()
        )))?;
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    let data = render_scene(&spec)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (w, h) = (data.intrinsics.width, data.intrinsics.height);
    for (frame, (image, depth)) in data.images.iter().zip(&data.depths).enumerate() {
        write_pfm(
            &out_dir.join(format!("image_{frame:04}.pfm")),
            &FloatRaster::from_scalar(w, h, image)?,
        )?;
        write_pfm(
            &out_dir.join(format!("depth_{frame:04}.pfm")),
            &FloatRaster::from_scalar(w, h, depth)?,
        )?;
    }
    tables::write_poses(&out_dir.join("poses.csv"), data.poses.iter().enumerate())?;
    tables::write_tracks(&out_dir.join("tracks.csv"), &data.tracks)?;
    tables::write_landmarks(
        &out_dir.join("landmarks.csv"),
        data.landmarks.iter().enumerate(),
    )?;
    println!(
        "rendered {} frames at {w}x{h} with {} track observations",
        data.poses.len(),
        data.tracks.len()
    );
    Ok(())
}
