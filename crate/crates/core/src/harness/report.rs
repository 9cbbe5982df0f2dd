//! Tables, plots and image mosaics from finished runs. Every writer is
//! deterministic: same report in, same bytes out.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::data::{write_json, Item};
use super::enhance::{topn_mean_delta, ImageRanking, Method, RunInfo, RunReport};
use super::imageio::save_png;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateRow {
    pub id: String,
    pub method: Method,
    pub rank: usize,
    pub sample: usize,
    pub internal: f64,
    pub external: f64,
    pub original_external: f64,
    pub delta: f64,
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerImageRow {
    pub id: String,
    pub method: Method,
    pub top_n: usize,
    pub mean_delta: f64,
    pub mean_internal: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: Method,
    pub top_n: usize,
    pub images: usize,
    pub mean_delta: f64,
    pub mean_internal: f64,
}

fn methods_of(report: &RunReport) -> Vec<Method> {
    Method::ALL
        .into_iter()
        .filter(|&m| report.images.iter().any(|i| i.run(m).is_some()))
        .collect()
}

pub fn candidate_rows(report: &RunReport) -> Vec<CandidateRow> {
    let mut rows = vec![];
    for img in &report.images {
        for run in &img.runs {
            for r in &run.ranked {
                rows.push(CandidateRow {
                    id: img.id.clone(),
                    method: run.method,
                    rank: r.rank,
                    sample: r.sample,
                    internal: r.internal,
                    external: r.external,
                    original_external: img.original_external,
                    delta: r.delta,
                    alpha: r.alpha,
                });
            }
        }
    }
    rows
}

/// Top-N means per image, for each configured N the run supports.
pub fn per_image_rows(report: &RunReport) -> Vec<PerImageRow> {
    let mut rows = vec![];
    for img in &report.images {
        for run in &img.runs {
            for &n in &report.info.top_n {
                if let Ok(d) = topn_mean_delta(&run.ranked, n) {
                    let internal = run.ranked[..n].iter().map(|r| r.internal).sum::<f64>() / n as f64;
                    rows.push(PerImageRow {
                        id: img.id.clone(),
                        method: run.method,
                        top_n: n,
                        mean_delta: d,
                        mean_internal: internal,
                    });
                }
            }
        }
    }
    rows
}

/// Means of the per-image rows over images; a `(method, N)` pair appears only
/// when every image supports it.
pub fn aggregate_rows(report: &RunReport) -> Vec<AggregateRow> {
    let per = per_image_rows(report);
    let mut rows = vec![];
    for m in methods_of(report) {
        for &n in &report.info.top_n {
            let sel: Vec<&PerImageRow> = per.iter().filter(|r| r.method == m && r.top_n == n).collect();
            if sel.is_empty() || sel.len() != report.images.len() {
                continue;
            }
            let k = sel.len() as f64;
            rows.push(AggregateRow {
                method: m,
                top_n: n,
                images: sel.len(),
                mean_delta: sel.iter().map(|r| r.mean_delta).sum::<f64>() / k,
                mean_internal: sel.iter().map(|r| r.mean_internal).sum::<f64>() / k,
            });
        }
    }
    rows
}

fn write_csv<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    let ser = |e: csv::Error| Error::Serialization(e.to_string());
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(ser)?;
    w.write_record(header).map_err(ser)?;
    for r in rows {
        w.serialize(r).map_err(ser)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub acceptance_rate: Option<f64>,
    pub mean_top1_alpha: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub info: RunInfo,
    pub images: usize,
    pub mean_original_external: Option<f64>,
    pub aggregate: Vec<AggregateRow>,
    pub methods: Vec<MethodSummary>,
}

pub fn summarize(report: &RunReport) -> Summary {
    let n = report.images.len();
    let mean = |v: Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let methods = methods_of(report)
        .into_iter()
        .map(|m| {
            let runs: Vec<_> = report.images.iter().filter_map(|i| i.run(m)).collect();
            let (p, a) = runs.iter().fold((0, 0), |(p, a), r| (p + r.proposals, a + r.accepted));
            MethodSummary {
                method: m,
                acceptance_rate: (p > 0).then(|| a as f64 / p as f64),
                mean_top1_alpha: mean(runs.iter().filter_map(|r| r.ranked.first().map(|c| c.alpha)).collect()),
            }
        })
        .collect();
    Summary {
        info: report.info.clone(),
        images: n,
        mean_original_external: mean(report.images.iter().map(|i| i.original_external).collect()),
        aggregate: aggregate_rows(report),
        methods,
    }
}

fn color(m: Method) -> &'static str {
    match m {
        Method::Baseline => "#7f7f7f",
        Method::Bae => "#1f77b4",
        Method::Abae => "#d62728",
        Method::Random => "#2ca02c",
    }
}

/// Line plot of several ascending-sorted series against their rank.
pub fn sorted_curves_svg(title: &str, y_label: &str, series: &[(String, &str, Vec<f64>)]) -> String {
    let (w, h, left, right, top, bottom) = (640.0, 400.0, 60.0, 130.0, 30.0, 40.0);
    let (pw, ph) = (w - left - right, h - top - bottom);
    let all: Vec<f64> = series.iter().flat_map(|s| s.2.iter().copied()).filter(|v| v.is_finite()).collect();
    let (mut lo, mut hi) = all
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo, hi) = (lo - 0.5, hi + 0.5);
    }
    let longest = series.iter().map(|s| s.2.len()).max().unwrap_or(0);
    let x_of = |i: usize, n: usize| left + if n > 1 { pw * i as f64 / (n - 1) as f64 } else { pw / 2.0 };
    let y_of = |v: f64| top + ph * (1.0 - (v - lo) / (hi - lo));

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle">{title}</text>"#, left + pw / 2.0);
    let _ = writeln!(
        s,
        r##"<path d="M{left} {top} V{} H{}" fill="none" stroke="#000"/>"##,
        top + ph,
        left + pw
    );
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let y = y_of(v);
        let _ = writeln!(
            s,
            r##"<line x1="{}" y1="{y:.2}" x2="{left}" y2="{y:.2}" stroke="#000"/><text x="{}" y="{:.2}" text-anchor="end">{v:.3}</text>"##,
            left - 4.0,
            left - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">image (sorted), n = {longest}</text>"#,
        left + pw / 2.0,
        h - 8.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{y_label}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    );
    for (k, (name, col, values)) in series.iter().enumerate() {
        let mut v = values.clone();
        v.sort_by(|a, b| a.total_cmp(b));
        if !v.is_empty() {
            let pts: Vec<String> = v
                .iter()
                .enumerate()
                .map(|(i, &y)| format!("{:.2},{:.2}", x_of(i, v.len()), y_of(y)))
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{col}" stroke-width="1.5"/>"#,
                pts.join(" ")
            );
        }
        let ly = top + 14.0 + 18.0 * k as f64;
        let lx = left + pw + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{col}" stroke-width="2"/><text x="{}" y="{}">{name}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0
        );
    }
    s.push_str("</svg>\n");
    s
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `candidates.csv`, `per_image.csv`, `aggregate.csv`, `summary.json`,
/// `delta_curves.svg` and `score_curves.svg` into `dir`.
pub fn emit_report(report: &RunReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_csv(
        &dir.join("candidates.csv"),
        &["id", "method", "rank", "sample", "internal", "external", "original_external", "delta", "alpha"],
        &candidate_rows(report),
    )?;
    write_csv(
        &dir.join("per_image.csv"),
        &["id", "method", "top_n", "mean_delta", "mean_internal"],
        &per_image_rows(report),
    )?;
    write_csv(
        &dir.join("aggregate.csv"),
        &["method", "top_n", "images", "mean_delta", "mean_internal"],
        &aggregate_rows(report),
    )?;
    write_json(&dir.join("summary.json"), &summarize(report))?;

    let top1 = |m: Method, f: &dyn Fn(&super::enhance::Ranked) -> f64| -> Vec<f64> {
        report
            .images
            .iter()
            .filter_map(|i| i.run(m).and_then(|r| r.ranked.first()).map(f))
            .collect()
    };
    let methods = methods_of(report);
    let deltas: Vec<(String, &str, Vec<f64>)> = methods
        .iter()
        .map(|&m| (m.to_string(), color(m), top1(m, &|r| r.delta)))
        .collect();
    write_text(
        &dir.join("delta_curves.svg"),
        &sorted_curves_svg("top-1 external score gain per image", "delta", &deltas),
    )?;
    let mut scores: Vec<(String, &str, Vec<f64>)> = vec![(
        "original".into(),
        "#000000",
        report.images.iter().map(|i| i.original_external).collect(),
    )];
    scores.extend(
        methods
            .iter()
            .map(|&m| (m.to_string(), color(m), top1(m, &|r| r.external))),
    );
    write_text(
        &dir.join("score_curves.svg"),
        &sorted_curves_svg("top-1 external score per image", "score", &scores),
    )
}

const MOSAIC_ZOOM: usize = 4;

/// One PNG per test image: the original on the left of every row, then that
/// method's best `per_row` stylizations, one row per method. Tiles are
/// enlarged with nearest-neighbour sampling.
pub fn write_mosaics(dir: &Path, items: &[Item], rankings: &[ImageRanking], images: usize, per_row: usize) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let z = MOSAIC_ZOOM;
    for (item, r) in items.iter().zip(rankings).take(images) {
        let [c, h, w] = item.image.shape()[..] else {
            return Err(Error::Dimension("mosaic needs [3,H,W] images".into()));
        };
        let (th, tw, gap) = (h * z, w * z, 2 * z);
        let (rows, cols) = (r.methods.len().max(1), per_row + 1);
        let (mh, mw) = (rows * (th + gap) - gap, cols * (tw + gap) - gap);
        let mut data = vec![1.0; c * mh * mw];
        let mut blit = |img: &Tensor, row: usize, col: usize| {
            let (y0, x0) = (row * (th + gap), col * (tw + gap));
            for ch in 0..c {
                for y in 0..th {
                    for x in 0..tw {
                        data[(ch * mh + y0 + y) * mw + x0 + x] = img.data()[(ch * h + y / z) * w + x / z];
                    }
                }
            }
        };
        for row in 0..rows {
            blit(&item.image, row, 0);
            if let Some(m) = r.methods.get(row) {
                for (k, cand) in m.ranking.top.iter().take(per_row).enumerate() {
                    blit(&cand.image, row, k + 1);
                }
            }
        }
        let methods: Vec<&str> = r.methods.iter().map(|m| m.method.name()).collect();
        let name = format!("{}_{}.png", item.id, methods.join("-"));
        save_png(&dir.join(name), &Tensor::new(&[c, mh, mw], data)?)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribute::AttributeMode;
    use crate::harness::enhance::{ImageReport, MethodRun, Ranked};
    use crate::sampler::SamplerKind;

    fn info() -> RunInfo {
        RunInfo {
            attribute: AttributeMode::Regression,
            master_seed: 0,
            sampler: SamplerKind::Langevin,
            tau: 0.1,
            lambda: 100.0,
            alpha: 0.5,
            samples: 3,
            top_n: vec![1, 2],
        }
    }

    fn run(method: Method, deltas: &[f64]) -> MethodRun {
        MethodRun {
            method,
            candidates: deltas.len(),
            proposals: 0,
            accepted: 0,
            ranked: deltas
                .iter()
                .enumerate()
                .map(|(i, &d)| Ranked {
                    rank: i + 1,
                    sample: i,
                    internal: 1.0 - i as f64,
                    external: d,
                    delta: d,
                    alpha: 0.5,
                })
                .collect(),
        }
    }

    #[test]
    fn empty_report_writes_headers_only() {
        let dir = tempfile::tempdir().unwrap();
        emit_report(&RunReport { info: info(), images: vec![] }, dir.path()).unwrap();
        let agg = std::fs::read_to_string(dir.path().join("aggregate.csv")).unwrap();
        assert_eq!(agg, "method,top_n,images,mean_delta,mean_internal\n");
        let svg = std::fs::read_to_string(dir.path().join("delta_curves.svg")).unwrap();
        assert!(svg.starts_with("<svg") && !svg.contains("polyline"));
    }

    #[test]
    fn aggregate_skips_unsupported_n() {
        let report = RunReport {
            info: info(),
            images: vec![
                ImageReport {
                    id: "a".into(),
                    original_external: 0.0,
                    runs: vec![run(Method::Bae, &[0.4, 0.2]), run(Method::Baseline, &[0.1])],
                },
                ImageReport {
                    id: "b".into(),
                    original_external: 0.0,
                    runs: vec![run(Method::Bae, &[0.0, 0.2]), run(Method::Baseline, &[0.3])],
                },
            ],
        };
        let rows = aggregate_rows(&report);
        let got: Vec<(Method, usize, f64)> = rows.iter().map(|r| (r.method, r.top_n, r.mean_delta)).collect();
        assert_eq!(got.len(), 3);
        assert_eq!(got[0], (Method::Baseline, 1, 0.2));
        assert_eq!(got[1].0, Method::Bae);
        assert!((got[1].2 - 0.2).abs() < 1e-15);
        assert!((got[2].2 - 0.2).abs() < 1e-15);
    }
}
