use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, ensure, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pgav_core::codec;
use pgav_core::fit::SupervisionSet;
use pgav_core::importance::{assign_scores, build_order, face_scores, random_order};
use pgav_core::mesh::{frames_to_json, load_cameras, load_frames, load_mesh, write_obj};
use pgav_core::pipeline;
use pgav_core::scene::demo_scene;
use pgav_core::session::{self, BandwidthProfile, RegionMask, SessionConfig};
use pgav_core::{Camera, FrameVertices, Image, NodeId, TemplateMesh};

use crate::config::RunConfig;
use crate::{Cli, Command, OrderKind, SceneArgs};

struct LoadedScene {
    mesh: TemplateMesh,
    cameras: Vec<Camera>,
    frame: FrameVertices,
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.fit.seed = seed;
    }
    if cli.threads.is_some() {
        cfg.threads = cli.threads;
    }
    if let Some(n) = cfg.threads {
        ensure!(n >= 1, "--threads must be at least 1");
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    println!("seed: {}", cfg.fit.seed);
    match cli.command {
        Command::Demo { out } => demo(&cfg, &out),
        Command::Build {
            scene,
            references,
            out,
            ranking_out,
            log_out,
            iterations,
            epsilon,
            max_level,
        } => {
            if let Some(n) = iterations {
                cfg.fit.iterations = n;
            }
            if let Some(e) = epsilon {
                cfg.fit.growth.epsilon = e;
            }
            if let Some(l) = max_level {
                cfg.fit.growth.max_level = l;
            }
            build(&cfg, &scene, references, out, ranking_out, log_out)
        }
        Command::Encode {
            scene,
            asset,
            order,
            mask,
            out,
        } => encode(&cfg, &scene, asset, order, mask, &out),
        Command::Rank {
            scene,
            asset,
            ranking_out,
        } => rank(&cfg, &scene, asset, ranking_out),
        Command::Render {
            scene,
            asset,
            prefix,
            camera,
            out,
        } => render(&cfg, &scene, asset, prefix, camera, &out),
        Command::StreamSim {
            scene,
            asset,
            bandwidth,
            tick_ms,
            mask,
            defer_masked,
            max_ticks,
            metrics_out,
            dump_dir,
        } => {
            let s = &mut cfg.stream;
            if let Some(b) = bandwidth {
                s.bandwidth = b;
            }
            if let Some(t) = tick_ms {
                s.tick_ms = t;
            }
            if let Some(m) = mask {
                s.mask = m;
            }
            s.defer_masked |= defer_masked;
            if let Some(m) = max_ticks {
                s.max_ticks = m;
            }
            stream_sim(&cfg, &scene, asset, metrics_out, dump_dir)
        }
        Command::Stats { asset } => stats(&cfg, asset),
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

/// Flag, then config entry, then `<scene dir>/<default_name>`.
fn pick(
    flag: &Option<PathBuf>,
    configured: &Option<PathBuf>,
    scene_dir: Option<&Path>,
    default_name: &str,
) -> Option<PathBuf> {
    flag.clone()
        .or_else(|| configured.clone())
        .or_else(|| scene_dir.map(|d| d.join(default_name)))
}

fn scene_dir<'a>(cfg: &'a RunConfig, args: &'a SceneArgs) -> Option<&'a Path> {
    args.scene.as_deref().or(cfg.paths.scene.as_deref())
}

fn load_scene(cfg: &RunConfig, args: &SceneArgs) -> Result<LoadedScene> {
    let dir = scene_dir(cfg, args);
    let mesh_path = pick(&args.mesh, &cfg.paths.mesh, dir, "mesh.obj")
        .ok_or_else(|| anyhow!("no mesh given (use --mesh or --scene)"))?;
    let (mesh, rest) = load_mesh(&mesh_path)?;
    let frames = match pick(&args.frames, &cfg.paths.frames, dir, "frames.json") {
        Some(p) => load_frames(&p, mesh.vertex_count())?,
        None => vec![rest],
    };
    let index = args.frame.unwrap_or(cfg.stream.frame);
    let frame = frames
        .get(index)
        .cloned()
        .ok_or_else(|| anyhow!("frame {index} out of range ({} frames)", frames.len()))?;
    frame.check_mesh(&mesh)?;
    let cam_path = pick(&args.cameras, &cfg.paths.cameras, dir, "cameras.json")
        .ok_or_else(|| anyhow!("no cameras given (use --cameras or --scene)"))?;
    let cameras = load_cameras(&cam_path)?;
    ensure!(!cameras.is_empty(), "{}: no cameras", cam_path.display());
    Ok(LoadedScene { mesh, cameras, frame })
}

fn asset_path(cfg: &RunConfig, flag: Option<PathBuf>) -> Result<PathBuf> {
    flag.or_else(|| cfg.paths.asset.clone())
        .ok_or_else(|| anyhow!("no asset given (use --asset)"))
}

fn reference_name(index: usize) -> String {
    format!("ref_{index:03}.ppm")
}

fn demo(cfg: &RunConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let scene = demo_scene(&cfg.scene, cfg.fit.seed);
    write(&out.join("mesh.obj"), write_obj(&scene.mesh, &scene.rest))?;
    write(&out.join("frames.json"), frames_to_json(&scene.frames))?;
    write(&out.join("cameras.json"), serde_json::to_string_pretty(&scene.cameras)?)?;
    for (i, img) in scene.references.iter().enumerate() {
        img.save_ppm(out.join(reference_name(i)))?;
    }
    println!(
        "demo: {} faces, {} frames, {} cameras at {}x{} -> {}",
        scene.mesh.face_count(),
        scene.frames.len(),
        scene.cameras.len(),
        cfg.scene.image_size,
        cfg.scene.image_size,
        out.display()
    );
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn build(
    cfg: &RunConfig,
    args: &SceneArgs,
    references: Option<PathBuf>,
    out: Option<PathBuf>,
    ranking_out: Option<PathBuf>,
    log_out: Option<PathBuf>,
) -> Result<()> {
    let scene = load_scene(cfg, args)?;
    let ref_dir = references
        .or_else(|| cfg.paths.references.clone())
        .or_else(|| scene_dir(cfg, args).map(Path::to_path_buf))
        .ok_or_else(|| anyhow!("no reference directory given (use --references or --scene)"))?;
    let refs = (0..scene.cameras.len())
        .map(|i| Image::load_ppm(ref_dir.join(reference_name(i))))
        .collect::<Result<Vec<_>, _>>()?;
    let sup = SupervisionSet::new(scene.cameras, refs, scene.frame)?;

    let out = out
        .or_else(|| cfg.paths.asset.clone())
        .unwrap_or_else(|| PathBuf::from("asset.pgav"));
    let ranking_out = ranking_out
        .or_else(|| cfg.paths.ranking.clone())
        .unwrap_or_else(|| with_suffix(&out, ".ranking.csv"));
    let log_out = log_out
        .or_else(|| cfg.paths.log.clone())
        .unwrap_or_else(|| with_suffix(&out, ".log.csv"));

    let built = pipeline::build(&scene.mesh, &sup, &cfg.fit)?;
    write(&out, &built.asset)?;
    write(&ranking_out, built.ranking.to_csv())?;
    write(&log_out, built.log.to_csv())?;
    println!(
        "build: {} nodes, levels {:?}, {} records, {} bytes -> {}",
        built.forest.len(),
        built.forest.level_histogram(),
        built.order.len(),
        built.asset.len(),
        out.display()
    );
    Ok(())
}

fn parse_mask(text: &str, face_count: usize) -> Result<Option<RegionMask>> {
    let text = text.trim();
    if text.is_empty() {
        return Ok(None);
    }
    let mut faces = Vec::new();
    for part in text.split(',') {
        let part = part.trim();
        let bad = || anyhow!("invalid mask entry '{part}' (expected FACE or FIRST-LAST)");
        match part.split_once('-') {
            Some((a, b)) => {
                let a: NodeId = a.trim().parse().map_err(|_| bad())?;
                let b: NodeId = b.trim().parse().map_err(|_| bad())?;
                ensure!(a <= b, "mask range '{part}' is reversed");
                faces.extend(a..=b);
            }
            None => faces.push(part.parse().map_err(|_| bad())?),
        }
    }
    faces.sort_unstable();
    faces.dedup();
    let mask = RegionMask { faces };
    mask.validate(face_count)?;
    Ok(Some(mask))
}

/// `RATE` or `MS:RATE,...,RATE`, rates in bytes per second. A final segment
/// without a duration lasts forever; otherwise the last rate persists.
pub fn parse_bandwidth(text: &str, tick_ms: f64) -> Result<BandwidthProfile> {
    ensure!(tick_ms > 0.0 && tick_ms.is_finite(), "tick length must be positive");
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    let mut segments = Vec::with_capacity(parts.len());
    for (i, part) in parts.iter().enumerate() {
        let bad = || anyhow!("invalid bandwidth segment '{part}' (expected RATE or MS:RATE)");
        let (duration, rate) = match part.split_once(':') {
            Some((d, r)) => (d.trim().parse::<f64>().map_err(|_| bad())?, r.trim()),
            None if i + 1 == parts.len() => (f64::INFINITY, *part),
            None => bail!("bandwidth segment '{part}' needs a duration"),
        };
        let rate: f64 = rate.parse().map_err(|_| bad())?;
        ensure!(rate >= 0.0, "bandwidth rate must be nonnegative");
        ensure!(duration > 0.0, "segment duration must be positive");
        // saturates for an unlimited link
        let per_tick = (rate * tick_ms / 1000.0).floor() as u64;
        segments.push((duration, per_tick));
    }
    let profile = BandwidthProfile { tick_ms, segments };
    profile.validate()?;
    Ok(profile)
}

fn decode_full(asset: &[u8], mesh: &TemplateMesh) -> Result<codec::DecodedState> {
    let (_, _, trailing) = codec::layout(asset)?;
    ensure!(trailing == 0, "asset ends with {trailing} bytes of a partial record");
    Ok(codec::decode_prefix(asset, mesh)?)
}

fn encode(
    cfg: &RunConfig,
    args: &SceneArgs,
    asset: Option<PathBuf>,
    kind: OrderKind,
    mask: Option<String>,
    out: &Path,
) -> Result<()> {
    let scene = load_scene(cfg, args)?;
    let path = asset_path(cfg, asset)?;
    let mut forest = decode_full(&read(&path)?, &scene.mesh)?.forest;
    let scores = face_scores(&forest, &scene.cameras, &scene.frame, cfg.fit.background)?;
    assign_scores(&mut forest, &scores);
    let mut order = match kind {
        OrderKind::Importance => build_order(&forest, &scores),
        OrderKind::Random => random_order(&forest, &scores, &mut ChaCha8Rng::seed_from_u64(cfg.fit.seed)),
    };
    if let Some(mask) = parse_mask(mask.as_deref().unwrap_or(&cfg.stream.mask), scene.mesh.face_count())? {
        order = order.filter_roots(&forest, |r| mask.faces.binary_search(&r).is_ok());
    }
    let bytes = codec::encode(&forest, &order)?;
    write(out, &bytes)?;
    println!(
        "encode: {} records, {} bytes -> {}",
        order.len(),
        bytes.len(),
        out.display()
    );
    Ok(())
}

fn rank(cfg: &RunConfig, args: &SceneArgs, asset: Option<PathBuf>, ranking_out: Option<PathBuf>) -> Result<()> {
    let scene = load_scene(cfg, args)?;
    let path = asset_path(cfg, asset)?;
    let forest = decode_full(&read(&path)?, &scene.mesh)?.forest;
    let scores = face_scores(&forest, &scene.cameras, &scene.frame, cfg.fit.background)?;
    let csv = build_order(&forest, &scores).to_csv();
    match ranking_out.or_else(|| cfg.paths.ranking.clone()) {
        Some(p) => write(&p, csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn render(
    cfg: &RunConfig,
    args: &SceneArgs,
    asset: Option<PathBuf>,
    prefix: f64,
    camera: usize,
    out: &Path,
) -> Result<()> {
    let scene = load_scene(cfg, args)?;
    let cam = scene
        .cameras
        .get(camera)
        .ok_or_else(|| anyhow!("camera {camera} out of range ({} cameras)", scene.cameras.len()))?;
    let bytes = read(&asset_path(cfg, asset)?)?;
    let image = session::render_prefix(&bytes, prefix, &scene.mesh, cam, &scene.frame, cfg.fit.background)?;
    write(out, image.to_ppm())?;
    println!(
        "render: prefix {prefix} ({} of {} bytes) -> {}",
        session::prefix_bytes(&bytes, prefix)?,
        bytes.len(),
        out.display()
    );
    Ok(())
}

fn stream_sim(
    cfg: &RunConfig,
    args: &SceneArgs,
    asset: Option<PathBuf>,
    metrics_out: Option<PathBuf>,
    dump_dir: Option<PathBuf>,
) -> Result<()> {
    let scene = load_scene(cfg, args)?;
    let bytes = read(&asset_path(cfg, asset)?)?;
    let s = &cfg.stream;
    let mut config = SessionConfig::new(parse_bandwidth(&s.bandwidth, s.tick_ms)?);
    config.mask = parse_mask(&s.mask, scene.mesh.face_count())?;
    config.defer_masked = s.defer_masked;
    config.max_ticks = s.max_ticks;
    config.background = cfg.fit.background;
    if let Some(d) = &dump_dir {
        fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
    }
    let metrics = session::run_session(
        &bytes,
        &scene.mesh,
        &scene.cameras,
        &scene.frame,
        &config,
        dump_dir.as_deref(),
    )?;
    let csv = metrics.to_csv();
    match metrics_out.or_else(|| cfg.paths.metrics.clone()) {
        Some(p) => {
            write(&p, csv)?;
            let last = metrics.checkpoints.last().expect("base checkpoint");
            println!(
                "stream-sim: {} checkpoints, final {} bytes, psnr {:.2} -> {}",
                metrics.checkpoints.len(),
                last.bytes,
                last.psnr,
                p.display()
            );
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn stats(cfg: &RunConfig, asset: Option<PathBuf>) -> Result<()> {
    let path = asset_path(cfg, asset)?;
    let bytes = read(&path)?;
    let (faces, records, trailing) = codec::layout(&bytes)?;
    let hist = codec::level_histogram(&bytes)?;
    let nodes: usize = hist.iter().sum();
    let levels: Vec<String> = hist.iter().map(usize::to_string).collect();
    println!("faces: {faces}");
    println!("records: {records}");
    println!("nodes: {nodes}");
    println!("level_histogram: {}", levels.join(";"));
    println!(
        "bytes: {} (12 + 56*{faces} + 188*{records} = {})",
        bytes.len(),
        codec::asset_size(faces, records)
    );
    if trailing > 0 {
        println!("trailing_bytes: {trailing}");
    }
    Ok(())
}
