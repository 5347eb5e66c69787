use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use svbrdf_forge::estimator::unet::estimate;
use svbrdf_forge::geometry::PointSource;
use svbrdf_forge::io::{self, ConfigFile, NormalPolicy, RunManifest, Section};
use svbrdf_forge::math::{Rgb, Vec3};
use svbrdf_forge::nbrdf::fit::fit_with_progress;
use svbrdf_forge::radiometry::ldr_clamp;
use svbrdf_forge::raster::HdrImage;
use svbrdf_forge::render::{build_estimator_input, colocated_position, render, RenderJob};
use svbrdf_forge::sampler::{eval_configs, ConfigKind, RngStream};
use svbrdf_forge::sphere::{render_sphere, render_sphere_environment, SphereMaterial, SphereScene};
use svbrdf_forge::gradcheck;

mod selftest;

/// GGX SVBRDF rendering, exemplar sampling and neural material fitting.
///
/// Set SVBRDF_FORGE_THREADS to cap the number of worker threads.
#[derive(Parser)]
#[command(name = "svbrdf-forge", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render SVBRDF maps under a point light to a PFM image.
    Render(RenderArgs),
    /// Draw light/view configurations, optionally rendering them as fit targets.
    SampleExemplars(SampleArgs),
    /// Predict a neural parameter map from a flash photograph.
    Estimate(EstimateArgs),
    /// Fit a neural material to a set of target exemplars.
    Fit(FitArgs),
    /// Render a fitted neural material under a new light and view.
    Relight(RelightArgs),
    /// Render one material pixel on a sphere.
    SphereRender(SphereArgs),
    /// Compare reverse-mode gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Run a quick battery of internal consistency checks.
    Selftest,
}

fn parse_vec3(s: &str) -> Result<Vec3, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("{t:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [x, y, z] => Ok(Vec3::new(x, y, z)),
        _ => Err(format!("expected X,Y,Z, got {s:?}")),
    }
}

fn parse_rgb(s: &str) -> Result<Rgb, String> {
    parse_vec3(s).map(|v| v.to_array())
}

#[derive(Args)]
struct RenderArgs {
    /// Directory with diffuse.png, specular.png, normal.png and roughness.png.
    #[arg(long)]
    maps: PathBuf,
    /// Light position.
    #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true)]
    light: Vec3,
    /// Camera position.
    #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true)]
    view: Vec3,
    /// Light intensity per channel.
    #[arg(long, value_parser = parse_rgb, default_value = "1,1,1")]
    intensity: Rgb,
    /// Divide by squared light distance.
    #[arg(long)]
    falloff: bool,
    /// Clamp the output to this white level, as an LDR photograph would.
    #[arg(long)]
    ldr_clamp: Option<f32>,
    /// Renormalize malformed normal-map texels instead of rejecting them.
    #[arg(long)]
    renormalize_normals: bool,
    /// Output PFM file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SampleArgs {
    /// Seed for the configuration draws.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of configurations.
    #[arg(long, default_value_t = 8)]
    count: usize,
    /// reflect, identity or hemisphere.
    #[arg(long, default_value = "reflect")]
    kind: ConfigKind,
    /// JSON file receiving the configurations.
    #[arg(long)]
    out: PathBuf,
    /// Also render each configuration from these maps ...
    #[arg(long, requires = "targets_dir")]
    maps: Option<PathBuf>,
    /// ... into this target directory, together with input.pfm, the
    /// co-located input photograph.
    #[arg(long, requires = "maps")]
    targets_dir: Option<PathBuf>,
    /// White level for clamping rendered targets and input.
    #[arg(long)]
    ldr_clamp: Option<f32>,
}

#[derive(Args)]
struct EstimateArgs {
    /// Co-located flash photograph.
    #[arg(long)]
    input: PathBuf,
    /// Container with a U-Net section.
    #[arg(long)]
    net: PathBuf,
    /// Output parameter map (NPMP).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    /// Co-located input photograph (PFM).
    #[arg(long)]
    input: PathBuf,
    /// Directory with exemplars.json and its PFM images.
    #[arg(long)]
    targets: PathBuf,
    /// JSON config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's iteration count.
    #[arg(long)]
    iterations: Option<usize>,
    /// Clamp input and targets to this white level before fitting.
    #[arg(long)]
    ldr_clamp: Option<f32>,
    /// Output parameter map (NPMP).
    #[arg(long)]
    out_params: PathBuf,
    /// Output network container (NBRF).
    #[arg(long)]
    out_net: PathBuf,
    /// Print the loss every N iterations (0 disables).
    #[arg(long, default_value_t = 100)]
    log_every: usize,
}

#[derive(Args)]
struct RelightArgs {
    /// Fitted parameter map (NPMP).
    #[arg(long)]
    params: PathBuf,
    /// Network container (NBRF).
    #[arg(long)]
    net: PathBuf,
    /// Light position.
    #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true)]
    light: Vec3,
    /// Camera position.
    #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true)]
    view: Vec3,
    /// Output PFM file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SphereArgs {
    /// ggx:DIR:X,Y or neural:PARAMS.npm:NET.nbrf:X,Y
    #[arg(long)]
    material: String,
    /// Light position; the sphere is the unit sphere at the origin seen from +z.
    #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true, default_value = "2,2,4")]
    light: Vec3,
    /// Image width and height in pixels.
    #[arg(long, default_value_t = 128)]
    res: usize,
    /// Divide by squared light distance.
    #[arg(long)]
    falloff: bool,
    /// Maps supplying the encoded normal of a neural pixel; +z when omitted.
    #[arg(long)]
    maps: Option<PathBuf>,
    /// Render under a uniform white environment with this many cosine
    /// samples per pixel instead of the point light.
    #[arg(long)]
    environment: Option<usize>,
    /// Seed for environment sampling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output PFM file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Seed for the random instances.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Records one manifest per distinct output directory.
struct Outputs {
    manifest: RunManifest,
    files: Vec<PathBuf>,
}

impl Outputs {
    fn new(command: &str) -> Self {
        Outputs {
            manifest: RunManifest::new(command),
            files: Vec::new(),
        }
    }

    fn add(&mut self, p: &Path) {
        self.files.push(p.to_path_buf());
    }

    fn finish(mut self) -> Result<()> {
        let dirs: BTreeSet<PathBuf> = self.files.iter().map(|f| parent_dir(f)).collect();
        self.manifest.outputs = self.files.iter().map(|f| f.display().to_string()).collect();
        for d in dirs {
            io::write_manifest(&d, &self.manifest)?;
        }
        Ok(())
    }
}

fn parent_dir(p: &Path) -> PathBuf {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn ensure_parent(p: &Path) -> Result<()> {
    std::fs::create_dir_all(parent_dir(p)).with_context(|| format!("creating directory for {}", p.display()))
}

fn maybe_clamp(img: HdrImage, white: Option<f32>) -> Result<HdrImage> {
    match white {
        Some(w) if !(w > 0.0 && w.is_finite()) => bail!("--ldr-clamp must be positive, got {w}"),
        Some(w) => Ok(ldr_clamp(&img, w)),
        None => Ok(img),
    }
}

fn cmd_render(a: RenderArgs) -> Result<()> {
    let policy = if a.renormalize_normals { NormalPolicy::Renormalize } else { NormalPolicy::Reject };
    let maps = io::load_svbrdf_maps(&a.maps, policy)?;
    let job = RenderJob {
        falloff: a.falloff,
        ..RenderJob::new(&maps, PointSource { position: a.light, intensity: a.intensity }, a.view)
    };
    let img = maybe_clamp(render(&job)?, a.ldr_clamp)?;
    ensure_parent(&a.out)?;
    io::write_pfm(&img, &a.out)?;
    let mut out = Outputs::new("render");
    out.manifest.falloff = a.falloff;
    out.add(&a.out);
    out.finish()
}

fn cmd_sample(a: SampleArgs) -> Result<()> {
    let mut rng = RngStream::new(a.seed);
    let configs = eval_configs(a.kind, a.count, &mut rng)?;
    ensure_parent(&a.out)?;
    io::write_exemplar_configs(&a.out, &configs)?;
    let mut out = Outputs::new("sample-exemplars");
    out.manifest.seed = Some(a.seed);
    out.add(&a.out);
    if let (Some(maps_dir), Some(dir)) = (&a.maps, &a.targets_dir) {
        let maps = io::load_svbrdf_maps(maps_dir, NormalPolicy::Reject)?;
        let mut targets = Vec::with_capacity(configs.len());
        for c in &configs {
            let img = render(&RenderJob::new(&maps, PointSource::white(c.light_position), c.view_position))?;
            targets.push((maybe_clamp(img, a.ldr_clamp)?, *c));
        }
        io::write_targets(dir, &targets)?;
        let photo = maybe_clamp(svbrdf_forge::render::colocated_input_render(&maps)?, a.ldr_clamp)?;
        let input = dir.join("input.pfm");
        io::write_pfm(&photo, &input)?;
        out.add(&dir.join(io::EXEMPLARS_FILE));
        out.add(&input);
    }
    out.finish()
}

fn cmd_estimate(a: EstimateArgs) -> Result<()> {
    let photo = io::read_pfm(&a.input)?;
    let net = io::unet_from_sections(&io::read_container(&a.net)?)?;
    let c = colocated_position();
    let x = build_estimator_input(&photo, c, c)?;
    let params = estimate(&x, &net)?;
    ensure_parent(&a.out)?;
    io::write_param_map(&params, &a.out)?;
    let mut out = Outputs::new("estimate");
    out.add(&a.out);
    out.finish()
}

#[derive(Serialize)]
struct TraceFile<'a> {
    trace: &'a [f64],
    masked_trace: &'a [f64],
}

fn cmd_fit(a: FitArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => io::read_config(p)?,
        None => ConfigFile::default(),
    };
    if let Some(s) = a.seed {
        cfg.fit.seed = s;
    }
    if let Some(n) = a.iterations {
        cfg.fit.iterations = n;
    }
    let photo = maybe_clamp(io::read_pfm(&a.input)?, a.ldr_clamp)?;
    let targets = io::read_targets(&a.targets)?
        .into_iter()
        .map(|(img, c)| Ok((maybe_clamp(img, a.ldr_clamp)?, c)))
        .collect::<Result<Vec<_>>>()?;
    let total = cfg.fit.iterations;
    let every = a.log_every;
    let result = fit_with_progress(&targets, &photo, &cfg.fit, &cfg.encoding, |i, loss| {
        if every > 0 && (i % every == 0 || i + 1 == total) {
            eprintln!("iter {i:>6}  loss {loss:.6}");
        }
    })?;

    ensure_parent(&a.out_params)?;
    ensure_parent(&a.out_net)?;
    io::write_param_map(&result.params, &a.out_params)?;
    let mut sections = io::brdf_sections(&result.brdf);
    if let Some(u) = &result.estimator {
        sections.push(Section::UNet(io::ESTIMATOR_SECTION.into(), u.clone()));
    }
    io::write_container(&sections, &a.out_net)?;
    let trace_path = parent_dir(&a.out_params).join("trace.json");
    let trace = TraceFile {
        trace: &result.trace,
        masked_trace: &result.masked_trace,
    };
    io::atomic_write(&trace_path, serde_json::to_string_pretty(&trace)?.as_bytes())?;
    if let Some(last) = result.trace.last() {
        println!("final loss {last:.6}");
    }

    let mut out = Outputs::new("fit");
    out.manifest.seed = Some(cfg.fit.seed);
    out.manifest.config_hash = Some(cfg.hash()?);
    out.manifest.falloff = cfg.falloff;
    out.manifest.encoding = Some(cfg.encoding);
    out.add(&a.out_params);
    out.add(&a.out_net);
    out.add(&trace_path);
    out.finish()
}

fn cmd_relight(a: RelightArgs) -> Result<()> {
    let params = io::read_param_map(&a.params)?;
    let brdf = io::read_neural_brdf(&a.net)?;
    let img = brdf.relight(&params, a.light, a.view)?;
    ensure_parent(&a.out)?;
    io::write_pfm(&img, &a.out)?;
    let mut out = Outputs::new("relight");
    out.manifest.encoding = Some(brdf.encoding);
    out.add(&a.out);
    out.finish()
}

fn parse_pixel(s: &str, w: usize, h: usize) -> Result<(usize, usize)> {
    let (x, y) = s.split_once(',').ok_or_else(|| anyhow!("pixel must be X,Y, got {s:?}"))?;
    let (x, y): (usize, usize) = (x.trim().parse()?, y.trim().parse()?);
    if x >= w || y >= h {
        bail!("pixel ({x}, {y}) lies outside the {w}x{h} map");
    }
    Ok((x, y))
}

fn cmd_sphere(a: SphereArgs) -> Result<()> {
    let (kind, rest) = a
        .material
        .split_once(':')
        .ok_or_else(|| anyhow!("--material must start with ggx: or neural:"))?;
    let (source, pixel) = rest
        .rsplit_once(':')
        .ok_or_else(|| anyhow!("--material must end with :X,Y"))?;
    let brdf_store;
    let params_store;
    let mut encoding = None;
    let material = match kind {
        "ggx" => {
            let maps = io::load_svbrdf_maps(Path::new(source), NormalPolicy::Reject)?;
            let (x, y) = parse_pixel(pixel, maps.width(), maps.height())?;
            SphereMaterial::Ggx(maps.sample(y * maps.width() + x))
        }
        "neural" => {
            let (p, n) = source
                .split_once(':')
                .ok_or_else(|| anyhow!("neural material needs PARAMS.npm:NET.nbrf:X,Y"))?;
            params_store = io::read_param_map(Path::new(p))?;
            brdf_store = io::read_neural_brdf(Path::new(n))?;
            encoding = Some(brdf_store.encoding);
            let (x, y) = parse_pixel(pixel, params_store.width(), params_store.height())?;
            let normal = match &a.maps {
                Some(dir) => {
                    let maps = io::load_svbrdf_maps(dir, NormalPolicy::Reject)?;
                    if (maps.width(), maps.height()) != (params_store.width(), params_store.height()) {
                        bail!("--maps size differs from the parameter map");
                    }
                    maps.normal()[y * maps.width() + x]
                }
                None => Vec3::Z,
            };
            SphereMaterial::Neural {
                brdf: &brdf_store,
                params: params_store.pixel_xy(x, y),
                normal,
            }
        }
        other => bail!("unknown material kind {other:?}; use ggx or neural"),
    };
    let mut scene = SphereScene::new(material, PointSource::white(a.light), a.res);
    scene.falloff = a.falloff;
    let img = match a.environment {
        Some(samples) => render_sphere_environment(&scene, 1.0, samples, a.seed)?,
        None => render_sphere(&scene)?,
    };
    ensure_parent(&a.out)?;
    io::write_pfm(&img, &a.out)?;
    let mut out = Outputs::new("sphere-render");
    out.manifest.falloff = a.falloff;
    out.manifest.encoding = encoding;
    if a.environment.is_some() {
        out.manifest.seed = Some(a.seed);
    }
    out.add(&a.out);
    out.finish()
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<bool> {
    let mut ok = true;
    for r in gradcheck::run_all(a.seed)? {
        println!("{r}");
        ok &= r.passed();
    }
    Ok(ok)
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("SVBRDF_FORGE_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| anyhow!("SVBRDF_FORGE_THREADS must be a positive integer, got {v:?}"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    configure_threads()?;
    match cli.command {
        Command::Render(a) => cmd_render(a)?,
        Command::SampleExemplars(a) => cmd_sample(a)?,
        Command::Estimate(a) => cmd_estimate(a)?,
        Command::Fit(a) => cmd_fit(a)?,
        Command::Relight(a) => cmd_relight(a)?,
        Command::SphereRender(a) => cmd_sphere(a)?,
        Command::Gradcheck(a) => return cmd_gradcheck(a),
        Command::Selftest => return selftest::run(),
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

