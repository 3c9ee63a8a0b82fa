use std::fs;
use std::path::Path;
use std::time::Instant;

use serde_json::{json, Value};
use spectrafuse::segmentation::{self, LabelMap};
use spectrafuse::{matching, pipeline, read_bundle, spectral, Bundle, RunConfig};

use crate::{report, EvalArgs, Failure, InspectArgs, MatchArgs, SegmentArgs, Side};

type CmdResult = std::result::Result<(), Failure>;

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CmdResult {
    fs::write(path, contents)
        .map_err(|e| Failure::usage(format!("cannot write {}: {e}", path.display())))
}

fn read_json(path: &Path) -> std::result::Result<Value, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::usage(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Failure::usage(format!("invalid JSON in {}: {e}", path.display())))
}

pub fn resolve_config(args: &SegmentArgs) -> std::result::Result<RunConfig, Failure> {
    let mut c = match &args.config {
        Some(path) => serde_json::from_value(read_json(path)?)
            .map_err(|e| Failure::usage(format!("invalid config {}: {e}", path.display())))?,
        None => RunConfig::default(),
    };
    if let Some(v) = args.alpha {
        c.alpha = v;
    }
    if let Some(v) = args.gamma {
        c.gamma = v;
    }
    if let Some(v) = args.eta {
        c.eta = v;
    }
    if let Some(v) = args.epsilon {
        c.epsilon = v;
    }
    if args.m.is_some() {
        c.m = args.m;
    }
    if let Some(v) = args.n {
        c.n = v;
    }
    if let Some(v) = args.cluster_threshold {
        c.cluster_threshold = v;
    }
    if let Some(v) = args.matching {
        c.matching = v;
    }
    c.use_vfm &= !args.no_vfm;
    c.use_tailoring &= !args.no_tailoring;
    c.use_prior_similarity &= !args.no_ops;
    c.use_text_adjustment &= !args.no_ota;
    c.validate()?;
    Ok(c)
}

/// Bundle problems, non-finite tensors included, are input errors.
fn load_bundle(path: &Path) -> std::result::Result<Bundle, Failure> {
    read_bundle(path).map_err(|e| Failure::usage(e.to_string()))
}

fn check_bundle_limits(bundle: &Bundle, config: &RunConfig) -> CmdResult {
    let (h, n) = (bundle.num_heads(), bundle.num_patches());
    let m = config.resolved_m(h);
    if config.use_vfm && m > n {
        return Err(spectrafuse::Error::InvalidM { m, max: n }.into());
    }
    if config.use_text_adjustment && config.n > n {
        return Err(spectrafuse::Error::InvalidN {
            n: config.n,
            max: n,
        }
        .into());
    }
    Ok(())
}

pub fn segment(args: &SegmentArgs) -> CmdResult {
    let started = Instant::now();
    let config = resolve_config(args)?;
    let bundle = load_bundle(&args.bundle)?;
    check_bundle_limits(&bundle, &config)?;
    let loaded = started.elapsed();

    let mut pool = rayon::ThreadPoolBuilder::new();
    if args.threads > 0 {
        pool = pool.num_threads(args.threads);
    }
    let pool = pool
        .build()
        .map_err(|e| Failure::usage(format!("cannot start thread pool: {e}")))?;
    let threads = pool.current_num_threads();
    let output = pool.install(|| pipeline::segment(&bundle, &config))?;
    let segmented = started.elapsed();

    fs::create_dir_all(&args.out)
        .map_err(|e| Failure::usage(format!("cannot create {}: {e}", args.out.display())))?;
    write_file(
        &args.out.join("labels.pgm"),
        segmentation::encode_pgm(&output.labels)?,
    )?;
    write_file(&args.out.join("labels.json"), report::labels_json(&bundle))?;
    write_file(
        &args.out.join("report.json"),
        report::segment_report(&bundle, &config, &output),
    )?;
    let total = started.elapsed();
    log::info!(
        "segmented {} windows on {threads} threads in {:.3}s",
        bundle.windows.len(),
        total.as_secs_f64()
    );

    if let Some(path) = &args.timing {
        let timing = json!({
            "threads": threads,
            "load_seconds": loaded.as_secs_f64(),
            "segment_seconds": (segmented - loaded).as_secs_f64(),
            "total_seconds": total.as_secs_f64(),
        });
        write_file(
            path,
            format!("{}\n", serde_json::to_string_pretty(&timing).expect("json")),
        )?;
    }
    Ok(())
}

fn pick_window(
    bundle: &Bundle,
    window: usize,
) -> std::result::Result<&spectrafuse::bundle::Window, Failure> {
    bundle.windows.get(window).ok_or_else(|| {
        Failure::usage(format!(
            "window {window} out of range, bundle has {}",
            bundle.windows.len()
        ))
    })
}

/// One CSV row per eigenvalue: `rank,eigenvalue,cumulative_fraction,selected`.
pub fn spectrum_csv(eigenvalues: &[f64], trace: f64, k: usize) -> String {
    let mut out = String::from("rank,eigenvalue,cumulative_fraction,selected\n");
    let mut cumulative = 0.0;
    for (i, &lambda) in eigenvalues.iter().enumerate() {
        cumulative += lambda.max(0.0);
        let fraction = if trace > 0.0 { cumulative / trace } else { 0.0 };
        out.push_str(&format!(
            "{},{lambda:?},{fraction:?},{}\n",
            i + 1,
            u8::from(i < k)
        ));
    }
    out
}

pub fn inspect_spectrum(args: &InspectArgs) -> CmdResult {
    let bundle = load_bundle(&args.bundle)?;
    let window = pick_window(&bundle, args.window)?;
    let keys = match args.side {
        Side::Vfm => &window.k_vfm,
        Side::Clip => &window.k_clip,
    };
    let h = keys.dim().0;
    if args.head >= h {
        return Err(Failure::usage(format!(
            "head {} out of range, bundle has {h} heads",
            args.head
        )));
    }
    let graph = spectrafuse::build_gram_graph(keys)?;
    let a = graph.head(args.head);
    let eig = spectral::eigendecompose_symmetric(a)?;
    let trace = spectral::trace(a);
    let selection = spectral::select_rank_energy(&eig.eigenvalues, trace, args.eta)?;
    log::info!(
        "selected k = {} (energy fraction {})",
        selection.k,
        selection.energy_fraction
    );
    print!("{}", spectrum_csv(&eig.eigenvalues, trace, selection.k));
    Ok(())
}

pub fn match_heads(args: &MatchArgs) -> CmdResult {
    let bundle = load_bundle(&args.bundle)?;
    let window = pick_window(&bundle, args.window)?;
    let vfm = spectrafuse::build_gram_graph(&window.k_vfm)?;
    let clip = spectrafuse::build_gram_graph(&window.k_clip)?;
    let m = args.m.unwrap_or(vfm.num_heads());
    let matched = matching::match_heads(&vfm, &clip, m, args.matching)?;
    let rows: Vec<Vec<f64>> = matched
        .cost_matrix
        .rows()
        .into_iter()
        .map(|r| r.to_vec())
        .collect();
    let doc = json!({
        "window": args.window,
        "origin_xy": window.origin_xy,
        "m": m,
        "matching": args.matching,
        "cost_matrix": rows,
        "vfm_signatures": matched.vfm_signatures.iter().map(|s| &s.values).collect::<Vec<_>>(),
        "clip_signatures": matched.clip_signatures.iter().map(|s| &s.values).collect::<Vec<_>>(),
        "pairs": matched.assignment.pairs,
        "weights": matched.assignment.weights,
    });
    println!("{}", serde_json::to_string_pretty(&doc).expect("json"));
    Ok(())
}

fn class_names(doc: &Value) -> Option<Vec<String>> {
    let list = match doc {
        Value::Array(_) => doc,
        Value::Object(o) => o.get("class_names")?,
        _ => return None,
    };
    list.as_array()?
        .iter()
        .map(|v| v.as_str().map(str::to_string))
        .collect()
}

pub fn eval(args: &EvalArgs) -> CmdResult {
    let pred: LabelMap = segmentation::read_pgm(&args.pred)?;
    let gt: LabelMap = segmentation::read_pgm(&args.gt)?;
    let names = class_names(&read_json(&args.classes)?).ok_or_else(|| {
        Failure::usage(format!(
            "{}: expected a list of class names or an object with `class_names`",
            args.classes.display()
        ))
    })?;
    let report = segmentation::evaluate(&pred, &gt, names.len(), args.ignore_index)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("json"));
    Ok(())
}
