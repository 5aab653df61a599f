use std::path::{Path, PathBuf};

use glimpse_core::data_io::{
    filter_label, normalize, normalize_with, read_glim, read_idx, split, stretch, write_csv, write_glim, write_pgm,
    Idx, ImageSet, ModelBundle, Payload,
};
use glimpse_core::design::{
    order_greedily, random_design, search_exhaustive, search_greedy, Design, DesignExport, DesignModel,
};
use glimpse_core::eval::{reconstruct_from, reconstruct_full, run_protocol, take_glimpses, EvalReport, ProtocolConfig};
use glimpse_core::learning::{
    independent_gaussian_loglik, init_from_glimpses, optimize, sample_glimpse_dataset, InitConfig, LearnProblem,
    LearnState, SamplingProtocol, Trainable,
};
use glimpse_core::models::{fit_fa_em, fit_mofa_x, fit_ppca, MofaModel};
use glimpse_core::retina::Offset;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{substream, DesignMode, InitKind, ModelKind, Protocol, RunConfig, Stream};
use crate::error::{CliError, CliResult};

fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} {} does not exist", path.display())))
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Usage(format!("cannot create output directory {}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|source| {
        CliError::Core(glimpse_core::Error::Io {
            path: path.to_path_buf(),
            source,
        })
    })
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("output serializes");
    s.push('\n');
    s
}

pub fn load_images(path: &Path) -> CliResult<ImageSet> {
    require_file(path, "image set")?;
    match read_glim(path)? {
        Payload::Images(set) => Ok(set),
        _ => Err(CliError::Usage(format!(
            "{} does not hold an image set",
            path.display()
        ))),
    }
}

pub fn load_model(path: &Path) -> CliResult<ModelBundle> {
    require_file(path, "model file")?;
    match read_glim(path)? {
        Payload::Model(b) => Ok(b),
        _ => Err(CliError::Usage(format!("{} does not hold a model", path.display()))),
    }
}

fn idx_images(images: &Path, labels: Option<&Path>, digit: Option<u8>) -> CliResult<ImageSet> {
    require_file(images, "IDX image file")?;
    let Idx::Images(set) = read_idx(images)? else {
        return Err(CliError::Usage(format!(
            "{} holds labels, not images",
            images.display()
        )));
    };
    let Some(digit) = digit else {
        return Ok(set);
    };
    let labels = labels.ok_or_else(|| CliError::Usage("--digit needs a label file".into()))?;
    require_file(labels, "IDX label file")?;
    let Idx::Labels(l) = read_idx(labels)? else {
        return Err(CliError::Usage(format!(
            "{} holds images, not labels",
            labels.display()
        )));
    };
    Ok(filter_label(&set, &l, digit)?)
}

pub struct IngestArgs {
    pub idx: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub test_idx: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub glim: Option<PathBuf>,
    pub digit: Option<u8>,
    pub normalize: bool,
    pub split: Option<f64>,
    pub seed: u64,
    pub out: PathBuf,
}

pub fn ingest(a: &IngestArgs) -> CliResult<()> {
    let mut train = match (&a.idx, &a.glim) {
        (Some(p), None) => idx_images(p, a.labels.as_deref(), a.digit)?,
        (None, Some(p)) => load_images(p)?,
        _ => return Err(CliError::Usage("give exactly one of --idx or --glim".into())),
    };
    let mut test = match &a.test_idx {
        Some(p) => Some(idx_images(p, a.test_labels.as_deref(), a.digit)?),
        None => None,
    };
    if a.split.is_some() && test.is_some() {
        return Err(CliError::Usage("--split cannot be combined with --test-idx".into()));
    }
    if a.normalize {
        train = normalize(&train, -1.0, 1.0)?;
        if let Some(t) = &test {
            test = Some(normalize_with(t, train.normalization.expect("just normalized"))?);
        }
    }
    if let Some(f) = a.split {
        let (tr, te) = split(&train, f, substream(a.seed, Stream::Split))?;
        train = tr;
        test = Some(te);
    }
    create_dir(&a.out)?;
    match &test {
        Some(t) => {
            write_glim(a.out.join("train.glim"), &Payload::Images(train.clone()))?;
            write_glim(a.out.join("test.glim"), &Payload::Images(t.clone()))?;
            println!("train {} images of {}x{}", train.count(), train.rows, train.cols);
            println!("test {} images of {}x{}", t.count(), t.rows, t.cols);
        }
        None => {
            write_glim(a.out.join("images.glim"), &Payload::Images(train.clone()))?;
            println!("images {} of {}x{}", train.count(), train.rows, train.cols);
        }
    }
    Ok(())
}

fn train_images(cfg: &RunConfig) -> CliResult<ImageSet> {
    let path = cfg
        .train
        .as_ref()
        .ok_or_else(|| CliError::Usage("config needs \"train\" (a GLIM image set)".into()))?;
    load_images(path)
}

pub fn fit(cfg: &RunConfig) -> CliResult<()> {
    let train = train_images(cfg)?;
    let d = train.pixels();
    let (k, m) = (cfg.model.k, cfg.model.m);
    if k >= d {
        return Err(CliError::Usage(format!(
            "model.k = {k} must be below the pixel count {d}"
        )));
    }
    let x = train.to_matrix();
    let (mixture, summary) = match cfg.model.kind {
        ModelKind::Ppca => {
            let f = fit_ppca(&x, k)?;
            let s = json!({ "sigma2": f.sigma2, "explained_variance": f.explained });
            (MofaModel::single(f.model), s)
        }
        ModelKind::Fa => {
            let f = fit_fa_em(&x, k, cfg.model.em_iterations, cfg.model.em_tol)?;
            if !f.converged {
                log::warn!(
                    "factor analysis EM did not converge in {} iterations",
                    cfg.model.em_iterations
                );
            }
            let s = json!({
                "loglik": f.loglik.last(),
                "loglik_per_image": f.loglik.last().map(|l| l / train.count() as f64),
                "em_iterations": f.loglik.len(),
                "converged": f.converged,
            });
            (MofaModel::single(f.model), s)
        }
        ModelKind::Mofa => {
            let f = fit_mofa_x(&x, k, m, substream(cfg.seed, Stream::KMeans))?;
            let s = json!({ "cluster_sizes": f.cluster_sizes, "explained_variance": f.explained });
            (f.model, s)
        }
    };
    let offsets = cfg.offsets.resolve()?;
    let metadata = json!({
        "command": "fit",
        "kind": cfg.model.kind,
        "k": k,
        "m": mixture.len(),
        "source": train.provenance,
        "images": train.count(),
    });
    let bundle = ModelBundle {
        mixture,
        retina: cfg.retina.clone(),
        rows: train.rows,
        cols: train.cols,
        offsets,
        noise_y: Vec::new(),
        metadata: metadata.to_string(),
    };
    bundle.projected()?;
    create_dir(&cfg.output_dir)?;
    write_glim(cfg.output_dir.join("model.glim"), &Payload::Model(bundle))?;
    let report = json!({ "model": metadata, "fit": summary });
    write_text(&cfg.output_dir.join("fit.json"), &to_json(&report))?;
    println!("fitted {:?} model: D = {d}, K = {k}, M = {m}", cfg.model.kind);
    Ok(())
}

pub fn learn(cfg: &RunConfig, fix_w: bool) -> CliResult<()> {
    let train = train_images(cfg)?;
    let offsets = cfg.offsets.resolve()?;
    let l = &cfg.learning;
    let protocol = match l.protocol {
        Protocol::Stratified => SamplingProtocol::Stratified {
            per_offset: l.per_offset,
        },
        Protocol::Uniform => SamplingProtocol::Uniform { n: l.n },
    };
    let data = sample_glimpse_dataset(
        &train,
        &cfg.retina,
        &offsets,
        protocol,
        substream(cfg.seed, Stream::Sampling),
    )?;
    let problem = LearnProblem::new(&data, l.grouped)?;

    let (state, base) = match l.init {
        InitKind::Glimpses => {
            if cfg.model.m != 1 {
                return Err(CliError::Usage(
                    "initialization from glimpses fits one component; use learning.init = \"model\" for mixtures"
                        .into(),
                ));
            }
            if cfg.model.k >= train.pixels() {
                return Err(CliError::Usage(format!(
                    "model.k = {} must be below the pixel count {}",
                    cfg.model.k,
                    train.pixels()
                )));
            }
            let icfg = InitConfig {
                max_iterations: l.init_iterations,
                tol: l.init_tol,
            };
            let init = init_from_glimpses(&data, cfg.model.k, &icfg)?;
            log::info!(
                "glimpse initialization: {:.1}% of entries missing",
                100.0 * init.missing_fraction
            );
            (init.state, MofaModel::single(init.model))
        }
        InitKind::Model => {
            let b = load_model(l.init_model.as_ref().expect("validated"))?;
            if (b.rows, b.cols) != (train.rows, train.cols) {
                return Err(CliError::Core(glimpse_core::Error::DimensionMismatch {
                    context: "initial model image size",
                    expected: train.pixels(),
                    found: b.rows * b.cols,
                }));
            }
            let rts = data.transforms()?;
            let pm = glimpse_core::models::ProjectedMixture::with_initial_noise(b.mixture.clone(), rts)?;
            (LearnState::from_projected(&pm), b.mixture)
        }
    };

    let trainable = if fix_w {
        Trainable::noise_only()
    } else {
        Trainable::default()
    };
    let out = optimize(state, &problem, &l.optimizer, trainable)?;
    let baseline = independent_gaussian_loglik(&data)?;

    let learned = out.state.to_mixture(&base)?;
    let metadata = json!({
        "command": "learn",
        "init": l.init,
        "fix_w": fix_w,
        "k": learned.latent(),
        "m": learned.len(),
        "source": train.provenance,
        "records": data.len(),
    });
    let bundle = ModelBundle {
        mixture: learned,
        retina: cfg.retina.clone(),
        rows: train.rows,
        cols: train.cols,
        offsets,
        noise_y: out.state.noise_table(),
        metadata: metadata.to_string(),
    };
    create_dir(&cfg.output_dir)?;
    write_glim(cfg.output_dir.join("model.glim"), &Payload::Model(bundle))?;
    write_glim(cfg.output_dir.join("glimpses.glim"), &Payload::Glimpses(data.clone()))?;
    let rows: Vec<Vec<String>> = out
        .trace
        .iter()
        .map(|t| {
            vec![
                t.iteration.to_string(),
                format!("{:.10e}", t.loglik),
                format!("{:.6e}", t.grad_norm),
                format!("{:.6e}", t.step),
            ]
        })
        .collect();
    write_csv(
        cfg.output_dir.join("trace.csv"),
        &["iteration", "loglik", "grad_norm", "step"],
        &rows,
    )?;
    let units = out.units as f64;
    let report = json!({
        "model": metadata,
        "log_base": "e",
        "units": out.units,
        "status": format!("{:?}", out.status),
        "iterations": out.trace.len() - 1,
        "baseline_per_example": baseline / units,
        "init_per_example": out.initial_per_example(),
        "final_per_example": out.final_per_example(),
    });
    write_text(&cfg.output_dir.join("learn.json"), &to_json(&report))?;
    println!(
        "log-likelihood per example (nats): baseline {:.4}, init {:.4}, optimized {:.4} ({:?})",
        baseline / units,
        out.initial_per_example(),
        out.final_per_example(),
        out.status
    );
    Ok(())
}

pub struct DesignArgs {
    pub model: PathBuf,
    pub j: usize,
    pub mode: DesignMode,
    pub seed: u64,
    pub top: usize,
    pub allow_duplicates: bool,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DesignFile {
    mode: DesignMode,
    j: usize,
    designs: Vec<DesignExport>,
}

pub fn design(a: &DesignArgs) -> CliResult<()> {
    if a.j == 0 {
        return Err(CliError::Usage("--j must be at least 1".into()));
    }
    let bundle = load_model(&a.model)?;
    let pm = bundle.projected()?;
    let mut model = DesignModel::new(&pm)?;
    model.allow_duplicates = a.allow_duplicates;
    let scores = match a.mode {
        DesignMode::Exhaustive => search_exhaustive(&model, a.j)?,
        DesignMode::Greedy => vec![search_greedy(&model, a.j)?],
        DesignMode::Random => vec![model.score(&random_design(
            pm.offsets(),
            a.j,
            substream(a.seed, Stream::RandomDesign),
        )?)?],
    };
    let designs = scores
        .iter()
        .take(a.top.max(1))
        .map(|s| {
            let mut s = s.clone();
            s.design = order_greedily(&model, &s.design)?;
            Ok(s.export(&bundle.offsets))
        })
        .collect::<CliResult<Vec<_>>>()?;
    let file = DesignFile {
        mode: a.mode,
        j: a.j,
        designs,
    };
    let text = to_json(&file);
    match &a.out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                create_dir(dir)?;
            }
            write_text(p, &text)?;
            let best = &file.designs[0];
            let spelled: Vec<String> = best.design.iter().map(Offset::to_string).collect();
            println!(
                "best design {} with EIG {:.4} bits ({:?})",
                spelled.join(" "),
                best.eig_bits,
                best.kind
            );
        }
        None => print!("{text}"),
    }
    Ok(())
}

/// A design file, a single exported design or a bare offset list.
#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum DesignInput {
    File { designs: Vec<DesignExport> },
    One(DesignExport),
    Offsets(Vec<Offset>),
}

fn read_design(path: &Path, offsets: &[Offset]) -> CliResult<Design> {
    require_file(path, "design file")?;
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read design {}: {e}", path.display())))?;
    let input: DesignInput = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("invalid design file {}: {e}", path.display())))?;
    let list = match input {
        DesignInput::File { designs } => {
            designs
                .into_iter()
                .next()
                .ok_or_else(|| CliError::Usage("design file lists no designs".into()))?
                .design
        }
        DesignInput::One(d) => d.design,
        DesignInput::Offsets(v) => v,
    };
    let ids = list
        .iter()
        .map(|o| {
            offsets
                .iter()
                .position(|x| x == o)
                .ok_or_else(|| CliError::Usage(format!("design offset {o} is not among the model's offsets")))
        })
        .collect::<CliResult<Vec<_>>>()?;
    if ids.is_empty() {
        return Err(CliError::Usage("design is empty".into()));
    }
    Ok(Design(ids))
}

pub struct EvaluateArgs {
    pub model: PathBuf,
    pub design: PathBuf,
    pub test: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
    pub threshold_bits: f64,
    pub panels: Vec<usize>,
}

fn fmt_p(p: Option<f64>) -> String {
    p.map(|v| format!("{v:.6e}")).unwrap_or_else(|| "NA".into())
}

pub fn evaluate(a: &EvaluateArgs) -> CliResult<()> {
    let bundle = load_model(&a.model)?;
    let test = load_images(&a.test)?;
    if (test.rows, test.cols) != (bundle.rows, bundle.cols) {
        return Err(CliError::Core(glimpse_core::Error::DimensionMismatch {
            context: "test image size",
            expected: bundle.rows * bundle.cols,
            found: test.pixels(),
        }));
    }
    let bed = read_design(&a.design, &bundle.offsets)?;
    let pm = bundle.projected()?;
    let cfg = ProtocolConfig {
        bed: bed.clone(),
        seed: substream(a.seed, Stream::RandomDesign),
        threshold_bits: a.threshold_bits,
    };
    let report = run_protocol(&pm, &test, &cfg)?;
    let label = if pm.components() == 1 { "FA" } else { "MoFA" };
    create_dir(&a.out)?;
    write_outputs(&a.out, &report, label)?;
    for &i in &a.panels {
        if i >= test.count() {
            return Err(CliError::Usage(format!(
                "panel index {i} exceeds the {} test images",
                test.count()
            )));
        }
        write_panels(&a.out, &pm, &test, i, &bed)?;
    }
    let (header, rows) = report.table(label);
    println!("{}", header.join("\t"));
    for r in rows {
        println!("{}", r.join("\t"));
    }
    for (f, t) in report.sign_tests.iter().enumerate() {
        println!(
            "{} fixation(s): BED better on {}/{} (ties {}), one-sided p = {}",
            f + 1,
            t.wins_a,
            t.n_effective,
            t.ties,
            fmt_p(t.p_one_sided)
        );
    }
    Ok(())
}

fn write_outputs(dir: &Path, report: &EvalReport, label: &str) -> CliResult<()> {
    let (header, rows) = report.table(label);
    write_csv(dir.join("rmse.csv"), &header, &rows)?;

    let mut per_image = Vec::new();
    for i in 0..report.images {
        for c in [&report.bed, &report.random] {
            for (f, e) in c.errors.iter().enumerate() {
                per_image.push(vec![
                    i.to_string(),
                    c.name.clone(),
                    f.to_string(),
                    format!("{:.8}", e[i]),
                ]);
            }
        }
        per_image.push(vec![
            i.to_string(),
            "full".into(),
            "full".into(),
            format!("{:.8}", report.full[i]),
        ]);
    }
    write_csv(
        dir.join("per_image.csv"),
        &["image", "design", "fixations", "rmse"],
        &per_image,
    )?;

    let tests: Vec<Vec<String>> = report
        .sign_tests
        .iter()
        .enumerate()
        .map(|(f, t)| {
            vec![
                (f + 1).to_string(),
                t.wins_a.to_string(),
                t.n_effective.to_string(),
                t.ties.to_string(),
                fmt_p(t.p_one_sided),
                fmt_p(t.p_two_sided),
            ]
        })
        .collect();
    write_csv(
        dir.join("sign_tests.csv"),
        &[
            "fixations",
            "bed_wins",
            "n_effective",
            "ties",
            "p_one_sided",
            "p_two_sided",
        ],
        &tests,
    )?;

    let mut census: Vec<Vec<String>> = report
        .census
        .iter()
        .enumerate()
        .map(|(f, c)| vec![f.to_string(), c.to_string()])
        .collect();
    census.push(vec!["full".into(), report.census_full.to_string()]);
    write_csv(
        dir.join("entropy_census.csv"),
        &["fixations", "above_threshold"],
        &census,
    )?;

    write_text(&dir.join("report.json"), &to_json(report))
}

fn write_panels(
    dir: &Path,
    pm: &glimpse_core::models::ProjectedMixture,
    test: &ImageSet,
    i: usize,
    bed: &Design,
) -> CliResult<()> {
    let (rows, cols) = (test.rows, test.cols);
    let x = test.image(i);
    write_pgm(dir.join(format!("image{i}_original.pgm")), rows, cols, x, None)?;
    for f in 0..=bed.len() {
        let (_, rec) = reconstruct_from(pm, x, &bed.0[..f])?;
        write_pgm(
            dir.join(format!("image{i}_fix{f}_mean.pgm")),
            rows,
            cols,
            &clamp(rec.image.as_slice()),
            None,
        )?;
        write_pgm(
            dir.join(format!("image{i}_fix{f}_variance.pgm")),
            rows,
            cols,
            &stretch(rec.variance.as_slice()),
            None,
        )?;
        if f > 0 {
            let a = bed.0[f - 1];
            let g = take_glimpses(pm, x, &[a])?;
            let up = pm.transforms[a].upsample(g[0].1.as_slice())?;
            write_pgm(
                dir.join(format!("image{i}_fix{f}_glimpse.pgm")),
                rows,
                cols,
                &clamp(&up.image),
                Some(&up.missing),
            )?;
        }
    }
    let (_, rec) = reconstruct_full(pm, x)?;
    write_pgm(
        dir.join(format!("image{i}_full_mean.pgm")),
        rows,
        cols,
        &clamp(rec.image.as_slice()),
        None,
    )?;
    Ok(())
}

fn clamp(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| x.clamp(-1.0, 1.0)).collect()
}
