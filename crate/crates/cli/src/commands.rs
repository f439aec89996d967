use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use rand::SeedableRng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use kpgroup::budget::{bundled_profiles, head_channels, memory_report, parse_profiles};
use kpgroup::cluster::{agglomerate, average_weights, cut, restricted_labels, Linkage};
use kpgroup::decode::{
    decode_full, sweep_sigma as run_sweep, DecodeParams, DetectionRecord, HeadTensors, LabeledScene, Refine,
};
use kpgroup::dissim::{
    anti_offsets_distance, apply_restrictions, conv_weight_distance, mean_offsets, offsets_distance,
};
use kpgroup::ingest::{
    read_annotations, read_tensor, read_text, write_tensor, write_text, DType, DecodeManifest, IngestError,
};
use kpgroup::metrics::{adjusted_rand_index, ambiguity_matrix, consensus_curve, inconsistent_pairs};
use kpgroup::schema::{check_grouping, CheckMode, Grouping, Head, KeypointSchema};
use kpgroup::synth::{figure4_case, random_scene, render, write_rendered, GroundTruth, RandomSceneParams, SceneSpec};
use kpgroup::Dendrogram;

use crate::{
    AnalyzeArgs, BudgetArgs, ConsensusArgs, DTypeArg, DecodeArgs, DecodeOptions, GroupArgs, HeadArg, InitWeightsArgs,
    LinkageArg, Method, ModeArg, RefineArg, SweepArgs, SynthArgs,
};

fn load_schema(path: &Path) -> Result<KeypointSchema> {
    KeypointSchema::from_json(&read_text(path)?).with_context(|| format!("reading schema {}", path.display()))
}

fn load_grouping(path: &Path) -> Result<Grouping> {
    Grouping::from_json(&read_text(path)?).with_context(|| format!("reading grouping {}", path.display()))
}

fn load_dendrogram(path: &Path) -> Result<Dendrogram> {
    Dendrogram::from_json(&read_text(path)?).with_context(|| format!("reading dendrogram {}", path.display()))
}

fn single_head(head: HeadArg) -> Result<Head> {
    match head {
        HeadArg::Reg => Ok(Head::Reg),
        HeadArg::Heat => Ok(Head::Heat),
        HeadArg::Both => bail!("--head both is not valid here; weights belong to a single head"),
    }
}

fn to_json_line<T: Serialize>(value: &T) -> String {
    let mut out = serde_json::to_string_pretty(value).expect("report serializes");
    out.push('\n');
    out
}

pub fn group(a: GroupArgs) -> Result<()> {
    let schema = load_schema(&a.schema)?;
    ensure!(
        (1..=schema.n()).contains(&a.clusters),
        "--clusters must be between 1 and {} keypoint types, got {}",
        schema.n(),
        a.clusters
    );
    if a.restrict {
        let minimum = schema.min_restricted_clusters();
        ensure!(
            a.clusters >= minimum,
            "--restrict needs at least {minimum} clusters (the largest class), got {}",
            a.clusters
        );
    }
    let linkage = match a.linkage {
        Some(LinkageArg::Average) => Linkage::Average,
        Some(LinkageArg::Complete) => Linkage::Complete,
        None if a.method == Method::AntiOffsets => Linkage::Complete,
        None => Linkage::Average,
    };
    let base = match &a.merge_into {
        Some(p) => {
            let g = load_grouping(p)?;
            check_grouping(&schema, &g, CheckMode::Unrestricted)?;
            g
        }
        None => Grouping::identity(&schema),
    };

    let matrix = match a.method {
        Method::Offsets | Method::AntiOffsets => {
            let path = a
                .annotations
                .as_ref()
                .context("--annotations is required for offsets methods")?;
            let annotations = read_annotations(path, &schema)?;
            let means = mean_offsets(&annotations, &schema)?;
            if a.method == Method::Offsets {
                offsets_distance(&means)?
            } else {
                anti_offsets_distance(&means)?
            }
        }
        Method::Conv => {
            let head = single_head(a.head)?;
            let path = a.weights.as_ref().context("--weights is required for --method conv")?;
            let weights = read_tensor(path)?;
            let bias = a.bias.as_deref().map(read_tensor).transpose()?;
            conv_weight_distance(&weights, bias.as_ref(), head, &schema)?
        }
    };

    let (dendrogram, labels) = if a.restrict {
        restricted_labels(&schema, &matrix, linkage, a.clusters)?
    } else {
        let d = agglomerate(&matrix, linkage)?;
        let labels = cut(&d, a.clusters)?;
        (d, labels)
    };
    let (reg, heat) = match a.head {
        HeadArg::Reg => (labels, base.heat_labels.clone()),
        HeadArg::Heat => (base.reg_labels.clone(), labels),
        HeadArg::Both => (labels.clone(), labels),
    };
    let grouping = Grouping::new(&schema, &reg, &heat)?;
    let report = check_grouping(&schema, &grouping, CheckMode::Unrestricted)?;
    if !report.decodable() {
        log::warn!(
            "grouping has {} ambiguous same-class pairs and cannot be decoded",
            report.ambiguous_pairs_total
        );
    }

    if let Some(p) = &a.matrix_out {
        let written = if a.restrict {
            apply_restrictions(&matrix, &schema)?
        } else {
            matrix.clone()
        };
        write_tensor(p, &written.to_tensor())?;
    }
    if let Some(p) = &a.dendrogram_out {
        write_text(p, &dendrogram.to_json())?;
    }
    write_text(&a.output, &grouping.to_json())?;
    println!(
        "grouping {} written to {} ({} ambiguous pairs)",
        grouping.notation(),
        a.output.display(),
        report.ambiguous_pairs_total
    );
    Ok(())
}

pub fn consensus(a: ConsensusArgs) -> Result<()> {
    if a.dendrograms {
        let da = load_dendrogram(&a.a)?;
        let db = load_dendrogram(&a.b)?;
        let counts: Vec<usize> = if a.counts.is_empty() {
            (1..=da.n).collect()
        } else {
            a.counts.clone()
        };
        let curve = consensus_curve(&da, &db, &counts)?;
        if a.json {
            let rows: Vec<_> = curve
                .iter()
                .map(|&(m, ari)| json!({"clusters": m, "ari": ari}))
                .collect();
            print!("{}", to_json_line(&rows));
        } else {
            println!("{:>8} {:>10}", "clusters", "ARI");
            for (m, ari) in curve {
                println!("{m:>8} {ari:>10.6}");
            }
        }
        return Ok(());
    }
    ensure!(a.counts.is_empty(), "--counts only applies with --dendrograms");
    let ga = load_grouping(&a.a)?;
    let gb = load_grouping(&a.b)?;
    ensure!(
        ga.schema_fingerprint == gb.schema_fingerprint,
        "groupings were built for different schemas"
    );
    let reg = adjusted_rand_index(&ga.reg_labels, &gb.reg_labels)?;
    let heat = adjusted_rand_index(&ga.heat_labels, &gb.heat_labels)?;
    if a.json {
        print!("{}", to_json_line(&json!({"reg": reg, "heat": heat})));
    } else {
        println!("reg  ARI {reg:.6}");
        println!("heat ARI {heat:.6}");
    }
    Ok(())
}

pub fn analyze(a: AnalyzeArgs) -> Result<()> {
    let schema = load_schema(&a.schema)?;
    ensure!(
        a.grouping.is_some() || a.dendrogram_reg.is_some(),
        "nothing to analyze: pass --grouping and/or --dendrogram-reg with --dendrogram-heat"
    );
    let mode = match a.mode {
        ModeArg::Restricted => CheckMode::Restricted,
        ModeArg::Unrestricted => CheckMode::Unrestricted,
    };
    let mut out = serde_json::Map::new();
    let mut text = String::new();

    if let Some(path) = &a.grouping {
        let grouping = load_grouping(path)?;
        let report = check_grouping(&schema, &grouping, mode)?;
        let (n_reg, pairs_reg) = inconsistent_pairs(&schema, &grouping.reg_labels)?;
        let (n_heat, pairs_heat) = inconsistent_pairs(&schema, &grouping.heat_labels)?;
        text.push_str(&format!("grouping {}\n", grouping.notation()));
        text.push_str(&format!(
            "restrictions {}\n",
            if report.restricted_ok { "respected" } else { "violated" }
        ));
        text.push_str(&format!("ambiguous pairs {}\n", report.ambiguous_pairs_total));
        text.push_str(&format!("inconsistent pairs reg {n_reg} heat {n_heat}\n"));
        for (head, pairs) in [("reg", &pairs_reg), ("heat", &pairs_heat)] {
            for p in pairs {
                text.push_str(&format!(
                    "  {head} class {} keypoints {} {}\n",
                    p.class_id, p.kp_a, p.kp_b
                ));
            }
        }
        text.push_str(&format!("verdict {}\n", if report.ok() { "ok" } else { "fail" }));
        out.insert("validity".into(), serde_json::to_value(&report)?);
        out.insert(
            "inconsistent".into(),
            json!({"reg": n_reg, "heat": n_heat, "reg_pairs": pairs_reg, "heat_pairs": pairs_heat}),
        );
    }

    if let (Some(pr), Some(ph)) = (&a.dendrogram_reg, &a.dendrogram_heat) {
        let dr = load_dendrogram(pr)?;
        let dh = load_dendrogram(ph)?;
        let all: Vec<usize> = (1..=schema.n()).collect();
        let counts_reg = if a.counts_reg.is_empty() {
            all.clone()
        } else {
            a.counts_reg.clone()
        };
        let counts_heat = if a.counts_heat.is_empty() {
            all
        } else {
            a.counts_heat.clone()
        };
        let matrix = ambiguity_matrix(&schema, &dr, &dh, &counts_reg, &counts_heat)?;
        if !text.is_empty() {
            text.push('\n');
        }
        text.push_str(&matrix.to_table());
        match matrix.cheapest() {
            Some((r, h)) => text.push_str(&format!("cheapest ambiguity-free grouping ({r},{h})\n")),
            None => text.push_str("no ambiguity-free grouping on this grid\n"),
        }
        out.insert("ambiguity".into(), serde_json::to_value(&matrix)?);
    }

    if a.json {
        print!("{}", to_json_line(&out));
    } else {
        print!("{text}");
    }
    Ok(())
}

pub fn budget(a: BudgetArgs) -> Result<()> {
    let (m_reg, m_heat) = match (&a.grouping, a.m_reg, a.m_heat, a.keypoints) {
        (Some(p), ..) => {
            let g = load_grouping(p)?;
            (g.m_reg, g.m_heat)
        }
        (None, Some(r), Some(h), None) => (r, h),
        (None, None, None, Some(k)) => (k, k),
        _ => bail!("one of --grouping, --m-reg with --m-heat, or --keypoints is required"),
    };
    let channels = head_channels(a.classes, m_reg, m_heat)?;
    let profiles = match &a.profiles {
        Some(p) => parse_profiles(&read_text(p)?)?,
        None => bundled_profiles(),
    };
    let report = memory_report(channels, &profiles, a.resolution)?;
    if let Some(r) = a.resolution {
        ensure!(!report.rows.is_empty(), "no encoder profile at resolution {r}");
    }
    if a.json {
        print!("{}", to_json_line(&report));
    } else {
        print!("{}", report.to_table());
    }
    Ok(())
}

fn decode_params(o: &DecodeOptions) -> Result<DecodeParams> {
    ensure!(
        o.sigma > 0.0 && o.sigma.is_finite(),
        "--sigma must be positive, got {}",
        o.sigma
    );
    ensure!(o.topk >= 1, "--topk must be at least 1");
    ensure!(o.jobs >= 1, "--jobs must be at least 1");
    for (name, v) in [("--center-thresh", o.center_thresh), ("--kp-thresh", o.kp_thresh)] {
        ensure!((0.0..=1.0).contains(&v), "{name} must be in [0, 1], got {v}");
    }
    Ok(DecodeParams {
        refine: match o.refine {
            RefineArg::Base => Refine::Base,
            RefineArg::Rescore => Refine::Rescore,
        },
        sigma: o.sigma,
        top_k: o.topk,
        center_threshold: o.center_thresh,
        kp_threshold: o.kp_thresh,
    })
}

fn load_manifest(path: &Path) -> Result<(DecodeManifest, KeypointSchema, Grouping)> {
    let manifest = DecodeManifest::read(path).with_context(|| format!("reading manifest {}", path.display()))?;
    let schema = load_schema(&manifest.schema)?;
    let grouping = load_grouping(&manifest.grouping)?;
    let report = check_grouping(&schema, &grouping, CheckMode::Unrestricted)?;
    ensure!(
        report.decodable(),
        "grouping has {} ambiguous same-class pairs and cannot be decoded",
        report.ambiguous_pairs_total
    );
    Ok((manifest, schema, grouping))
}

pub fn decode(a: DecodeArgs) -> Result<()> {
    let params = decode_params(&a.options)?;
    ensure!(
        a.stride > 0.0 && a.stride.is_finite(),
        "--stride must be positive, got {}",
        a.stride
    );
    let (manifest, schema, grouping) = load_manifest(&a.manifest)?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(a.options.jobs).build()?;
    let images = pool.install(|| {
        manifest
            .images
            .par_iter()
            .map(|image| {
                let heads = HeadTensors::read(image).with_context(|| format!("loading image {}", image.id))?;
                let detections = decode_full(&heads, &schema, &grouping, &params)
                    .with_context(|| format!("decoding image {}", image.id))?;
                log::info!("{}: {} detections", image.id, detections.len());
                let records: Vec<DetectionRecord> = detections
                    .iter()
                    .map(|d| DetectionRecord::from_detection(d, a.stride))
                    .collect();
                Ok(json!({"id": image.id, "detections": records}))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let total: usize = images
        .iter()
        .map(|i| i["detections"].as_array().map_or(0, Vec::len))
        .sum();
    write_text(&a.output, &to_json_line(&json!({"images": images})))?;
    println!(
        "{} images, {total} detections written to {}",
        images.len(),
        a.output.display()
    );
    Ok(())
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let dtype = match a.dtype {
        DTypeArg::F32 => DType::F32,
        DTypeArg::F64 => DType::F64,
    };
    let (schema, grouping, scenes) = if a.figure4 {
        ensure!(
            a.schema.is_none() && a.grouping.is_none(),
            "--figure4 brings its own schema and grouping"
        );
        let case = figure4_case();
        (case.schema, case.grouping, vec![("figure4".to_string(), case.spec)])
    } else {
        let schema = load_schema(a.schema.as_deref().context("--schema is required unless --figure4")?)?;
        let grouping = match &a.grouping {
            Some(p) => load_grouping(p)?,
            None => Grouping::identity(&schema),
        };
        let scenes = match (&a.scene, a.random) {
            (Some(p), None) => {
                let spec =
                    SceneSpec::from_json(&read_text(p)?).with_context(|| format!("reading scene {}", p.display()))?;
                vec![("scene".to_string(), spec)]
            }
            (None, Some(count)) => {
                ensure!(count >= 1, "--random must be at least 1");
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(a.seed);
                let params = RandomSceneParams::default();
                (0..count)
                    .map(|i| {
                        Ok((
                            format!("scene{i:04}"),
                            random_scene(&mut rng, &schema, &grouping, &params)?,
                        ))
                    })
                    .collect::<Result<Vec<_>>>()?
            }
            _ => bail!("one of --scene, --figure4 or --random is required"),
        };
        (schema, grouping, scenes)
    };
    let rendered = scenes
        .iter()
        .map(|(stem, spec)| render(spec, &schema, &grouping).with_context(|| format!("rendering {stem}")))
        .collect::<Result<Vec<_>>>()?;

    std::fs::create_dir_all(&a.out_dir).map_err(|e| IngestError::io(&a.out_dir, e))?;
    let mut images = Vec::with_capacity(scenes.len());
    for ((stem, spec), r) in scenes.iter().zip(&rendered) {
        images.push(write_rendered(&a.out_dir, stem, r, dtype)?);
        write_text(&a.out_dir.join(format!("{stem}_scene.json")), &spec.to_json())?;
    }
    write_text(&a.out_dir.join("schema.json"), &schema.to_json())?;
    write_text(&a.out_dir.join("grouping.json"), &grouping.to_json())?;
    let manifest = DecodeManifest {
        schema: "schema.json".into(),
        grouping: "grouping.json".into(),
        images,
    };
    write_text(&a.out_dir.join("manifest.json"), &manifest.to_json())?;
    println!("{} scenes written to {}", scenes.len(), a.out_dir.display());
    Ok(())
}

pub fn sweep_sigma(a: SweepArgs) -> Result<()> {
    ensure!(!a.sigmas.is_empty(), "--sigmas must not be empty");
    for &s in &a.sigmas {
        ensure!(s > 0.0 && s.is_finite(), "every sigma must be positive, got {s}");
    }
    ensure!(
        a.pck > 0.0 && a.pck.is_finite(),
        "--pck must be positive, got {}",
        a.pck
    );
    ensure!(a.topk >= 1, "--topk must be at least 1");
    ensure!(
        (0.0..=1.0).contains(&a.center_thresh),
        "--center-thresh must be in [0, 1]"
    );
    let (manifest, schema, grouping) = load_manifest(&a.manifest)?;
    let scenes = manifest
        .images
        .iter()
        .map(|image| {
            let gt = image
                .ground_truth
                .as_ref()
                .with_context(|| format!("image {} has no ground_truth", image.id))?;
            Ok(LabeledScene {
                heads: HeadTensors::read(image).with_context(|| format!("loading image {}", image.id))?,
                truth: GroundTruth::from_json(&read_text(gt)?)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let params = DecodeParams {
        top_k: a.topk,
        center_threshold: a.center_thresh,
        ..DecodeParams::default()
    };
    let sweep = run_sweep(&scenes, &schema, &grouping, &params, &a.sigmas, a.pck)?;
    println!("{:>8} {:>8}", "sigma", "PCK");
    for (s, acc) in &sweep.per_sigma {
        println!("{s:>8.3} {acc:>8.4}");
    }
    println!("best sigma {} (PCK {:.4})", sweep.best_sigma, sweep.best_accuracy);
    if let Some(p) = &a.output {
        write_text(p, &to_json_line(&sweep))?;
    }
    Ok(())
}

pub fn init_weights(a: InitWeightsArgs) -> Result<()> {
    let head = single_head(a.head)?;
    let grouping = load_grouping(&a.grouping)?;
    let labels = grouping.labels(head);
    let weights = read_tensor(&a.weights)?;
    let (map, grouped) = average_weights(&weights, labels, head)?;
    let bias = match &a.bias {
        Some(p) => Some(average_weights(&read_tensor(p)?, labels, head)?.1),
        None => None,
    };
    write_tensor(&a.output, &grouped)?;
    if let (Some(b), Some(p)) = (&bias, &a.bias_out) {
        write_tensor(p, b)?;
    }
    if let Some(p) = &a.map_out {
        write_text(p, &to_json_line(&map))?;
    }
    println!(
        "{head} weights {:?} -> {:?} written to {}",
        weights.shape(),
        grouped.shape(),
        a.output.display()
    );
    Ok(())
}
