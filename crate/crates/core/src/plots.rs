//! Static figures from a finished report and the sampled activations.
//!
//! Files written by [`emit_plots`] into the output directory:
//!
//! | file | content |
//! |---|---|
//! | `heatmap_seed{s}.svg` | task/metric × intervention grid of deltas vs full |
//! | `pca_rgb.png` | per sample image: the input, then PCA-RGB of each condition |
//! | `attention_js_seed{s}.svg` | JS divergence vs layer, one line per condition |
//! | `attention_flow_{condition}_seed{s}.svg` | stacked per-layer attention mass by target group, one panel per source group |
//!
//! A plot whose rows are missing is skipped and listed in [`PlotOutput::skipped`].

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::archive::TensorArchive;
use crate::error::{Error, Result};
use crate::experiment::{MetricReport, FULL};
use crate::vit::GroupKind;

const PALETTE: [&str; 8] = [
    "#222222", "#d62728", "#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2",
];

/// Geometry rows shown in the heatmap; per-layer attention rows are plotted separately.
const HEATMAP_GEOMETRY: [&str; 3] = ["patch_cosine", "effective_rank", "spectrum_entropy"];

#[derive(Debug, Default)]
pub struct PlotOutput {
    pub written: Vec<PathBuf>,
    /// One notice per plot that could not be drawn.
    pub skipped: Vec<String>,
}

/// Deltas vs full; `cells[row][col]` is `None` where the report has no row.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapGrid {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub cells: Vec<Vec<Option<f64>>>,
}

fn seeds(report: &MetricReport) -> Vec<u64> {
    let mut s: Vec<u64> = report.rows.iter().map(|r| r.seed).collect();
    s.sort_unstable();
    s.dedup();
    s
}

pub fn heatmap_grid(report: &MetricReport, seed: u64) -> Option<HeatmapGrid> {
    let mut rows: Vec<String> = Vec::new();
    let mut cols: Vec<String> = Vec::new();
    let mut values: BTreeMap<(String, String), f64> = BTreeMap::new();
    for r in report.rows.iter().filter(|r| r.seed == seed) {
        if r.task == "geometry" && !HEATMAP_GEOMETRY.contains(&r.metric.as_str()) {
            continue;
        }
        let Some(d) = r.delta_vs_full else { continue };
        let key = format!("{}/{}", r.task, r.metric);
        if !rows.contains(&key) {
            rows.push(key.clone());
        }
        if !cols.contains(&r.intervention) {
            cols.push(r.intervention.clone());
        }
        values.insert((key, r.intervention.clone()), d);
    }
    if rows.is_empty() {
        return None;
    }
    let cells = rows
        .iter()
        .map(|row| cols.iter().map(|c| values.get(&(row.clone(), c.clone())).copied()).collect())
        .collect();
    Some(HeatmapGrid { rows, cols, cells })
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Cells are shaded per row by `delta / max |delta|`: red for drops, blue for gains.
pub fn heatmap_svg(grid: &HeatmapGrid, title: &str) -> String {
    let (cw, ch, left, top) = (110.0, 28.0, 240.0, 90.0);
    let w = left + cw * grid.cols.len() as f64 + 20.0;
    let h = top + ch * grid.rows.len() as f64 + 20.0;
    let mut s = svg_open(w, h);
    let _ = writeln!(s, r#"<text x="10" y="20" font-size="14">{}</text>"#, escape(title));
    for (j, c) in grid.cols.iter().enumerate() {
        let x = left + cw * (j as f64 + 0.5);
        let _ = writeln!(
            s,
            r#"<text x="{x:.1}" y="{:.1}" font-size="11" text-anchor="start" transform="rotate(-30 {x:.1} {:.1})">{}</text>"#,
            top - 8.0,
            top - 8.0,
            escape(c)
        );
    }
    for (i, (name, row)) in grid.rows.iter().zip(&grid.cells).enumerate() {
        let y = top + ch * i as f64;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="end">{}</text>"#,
            left - 6.0,
            y + ch * 0.65,
            escape(name)
        );
        let scale = row.iter().flatten().fold(0.0f64, |m, d| m.max(d.abs()));
        for (j, cell) in row.iter().enumerate() {
            let x = left + cw * j as f64;
            let (fill, label) = match cell {
                None => ("#eeeeee".to_owned(), "n/a".to_owned()),
                Some(d) => {
                    let t = if scale > 0.0 { d / scale } else { 0.0 };
                    (diverging(t), format!("{d:+.3}"))
                }
            };
            let _ = writeln!(
                s,
                r##"<rect x="{x:.1}" y="{y:.1}" width="{cw}" height="{ch}" fill="{fill}" stroke="#ffffff"/><text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle">{label}</text>"##,
                x + cw / 2.0,
                y + ch * 0.65
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

fn diverging(t: f64) -> String {
    let t = t.clamp(-1.0, 1.0);
    let fade = |c: f64| (255.0 - (255.0 - c) * t.abs()).round() as u8;
    let (r, g, b) = if t < 0.0 {
        (fade(214.0), fade(39.0), fade(40.0))
    } else {
        (fade(31.0), fade(119.0), fade(180.0))
    };
    format!("#{r:02x}{g:02x}{b:02x}")
}

fn svg_open(w: f64, h: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{h:.0}\" font-family=\"sans-serif\">\n<rect width=\"100%\" height=\"100%\" fill=\"#ffffff\"/>\n"
    )
}

fn layer_of(metric: &str, prefix: &str) -> Option<(usize, String)> {
    let rest = metric.strip_prefix(prefix)?;
    let end = rest.find(|c: char| !c.is_ascii_digit()).unwrap_or(rest.len());
    Some((rest[..end].parse().ok()?, rest[end..].to_owned()))
}

/// Condition → per-layer JS divergence vs full.
pub fn js_curves(report: &MetricReport, seed: u64) -> BTreeMap<String, Vec<(usize, f64)>> {
    let mut out: BTreeMap<String, Vec<(usize, f64)>> = BTreeMap::new();
    for r in report.rows.iter().filter(|r| r.seed == seed && r.task == "geometry") {
        if let Some((l, rest)) = layer_of(&r.metric, "attention_js_layer") {
            if rest.is_empty() {
                out.entry(r.intervention.clone()).or_default().push((l, r.value));
            }
        }
    }
    for v in out.values_mut() {
        v.sort_by_key(|p| p.0);
    }
    out
}

/// `[layer][target]` attention fraction from `src` for one condition.
pub fn flow_series(report: &MetricReport, seed: u64, condition: &str, src: GroupKind) -> Vec<[f64; 3]> {
    let mut by_layer: BTreeMap<usize, [f64; 3]> = BTreeMap::new();
    for r in report
        .rows
        .iter()
        .filter(|r| r.seed == seed && r.task == "geometry" && r.intervention == condition)
    {
        let Some((l, rest)) = layer_of(&r.metric, "attention_flow_layer") else { continue };
        for (k, tgt) in GroupKind::ALL.iter().enumerate() {
            if rest == format!("_{}_to_{}", src.name(), tgt.name()) {
                by_layer.entry(l).or_default()[k] = r.value;
            }
        }
    }
    by_layer.into_values().collect()
}

struct Frame {
    x0: f64,
    y0: f64,
    w: f64,
    h: f64,
    xmax: f64,
    ymax: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        self.x0 + if self.xmax > 0.0 { x / self.xmax * self.w } else { 0.0 }
    }

    fn py(&self, y: f64) -> f64 {
        self.y0 + self.h - if self.ymax > 0.0 { y / self.ymax * self.h } else { 0.0 }
    }

    fn axes(&self, s: &mut String, xlabel: &str, ylabel: &str) {
        let _ = writeln!(
            s,
            r##"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="#444444"/>"##,
            self.x0, self.y0, self.w, self.h
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle">{}</text>"#,
            self.x0 + self.w / 2.0,
            self.y0 + self.h + 32.0,
            escape(xlabel)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle" transform="rotate(-90 {:.1} {:.1})">{}</text>"#,
            self.x0 - 42.0,
            self.y0 + self.h / 2.0,
            self.x0 - 42.0,
            self.y0 + self.h / 2.0,
            escape(ylabel)
        );
        for k in 0..=4 {
            let v = self.ymax * k as f64 / 4.0;
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{v:.3}</text>"#,
                self.x0 - 4.0,
                self.py(v) + 3.0
            );
        }
        let step = ((self.xmax / 10.0).ceil() as usize).max(1);
        for l in (0..=self.xmax as usize).step_by(step) {
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="middle">{l}</text>"#,
                self.px(l as f64),
                self.y0 + self.h + 14.0
            );
        }
    }
}

pub fn js_svg(curves: &BTreeMap<String, Vec<(usize, f64)>>, title: &str) -> String {
    let xmax = curves.values().flatten().map(|p| p.0).max().unwrap_or(0) as f64;
    let ymax = curves.values().flatten().map(|p| p.1).fold(0.0f64, f64::max);
    let frame = Frame {
        x0: 70.0,
        y0: 40.0,
        w: 440.0,
        h: 260.0,
        xmax: xmax.max(1.0),
        ymax: if ymax > 0.0 { ymax * 1.05 } else { 1.0 },
    };
    let mut s = svg_open(720.0, 360.0);
    let _ = writeln!(s, r#"<text x="10" y="20" font-size="14">{}</text>"#, escape(title));
    frame.axes(&mut s, "layer", "JS divergence (nats)");
    // Full first so it sits under the others.
    let mut names: Vec<&String> = curves.keys().collect();
    names.sort_by_key(|n| (n.as_str() != FULL, n.as_str()));
    for (i, name) in names.into_iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = curves[name]
            .iter()
            .map(|&(l, v)| format!("{:.1},{:.1}", frame.px(l as f64), frame.py(v)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            pts.join(" ")
        );
        let y = 50.0 + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="530" y1="{y:.1}" x2="550" y2="{y:.1}" stroke="{color}" stroke-width="2"/><text x="556" y="{:.1}" font-size="11">{}</text>"#,
            y + 4.0,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// One stacked-area panel per source group.
pub fn flow_svg(panels: &[(GroupKind, Vec<[f64; 3]>)], title: &str) -> String {
    let colors = ["#ff7f0e", "#d62728", "#1f77b4"];
    let pw = 300.0;
    let mut s = svg_open(90.0 + (pw + 80.0) * panels.len() as f64, 380.0);
    let _ = writeln!(s, r#"<text x="10" y="20" font-size="14">{}</text>"#, escape(title));
    for (p, (src, series)) in panels.iter().enumerate() {
        let frame = Frame {
            x0: 70.0 + (pw + 80.0) * p as f64,
            y0: 50.0,
            w: pw,
            h: 240.0,
            xmax: (series.len().max(2) - 1) as f64,
            ymax: 1.0,
        };
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="42" font-size="12" text-anchor="middle">from {}</text>"#,
            frame.x0 + pw / 2.0,
            src.name()
        );
        let mut lower = vec![0.0; series.len()];
        for (k, color) in colors.iter().enumerate() {
            let upper: Vec<f64> = lower.iter().zip(series).map(|(lo, f)| lo + f[k]).collect();
            let mut pts: Vec<String> = upper
                .iter()
                .enumerate()
                .map(|(l, &v)| format!("{:.1},{:.1}", frame.px(l as f64), frame.py(v)))
                .collect();
            pts.extend(
                lower
                    .iter()
                    .enumerate()
                    .rev()
                    .map(|(l, &v)| format!("{:.1},{:.1}", frame.px(l as f64), frame.py(v))),
            );
            let _ = writeln!(s, r#"<polygon points="{}" fill="{color}" fill-opacity="0.8"/>"#, pts.join(" "));
            lower = upper;
        }
        frame.axes(&mut s, "layer", "attention fraction");
    }
    for (k, tgt) in GroupKind::ALL.iter().enumerate() {
        let x = 70.0 + 110.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{x:.1}" y="340" width="12" height="12" fill="{}"/><text x="{:.1}" y="350" font-size="11">to {}</text>"#,
            colors[k],
            x + 16.0,
            tgt.name()
        );
    }
    s.push_str("</svg>\n");
    s
}

fn sample_conditions(samples: &TensorArchive) -> Vec<String> {
    samples
        .metadata
        .get("conditions")
        .and_then(|v| serde_json::from_value(v.clone()).ok())
        .unwrap_or_default()
}

/// Grid of the input images and their PCA-RGB maps, or `None` when the
/// archive holds no samples.
pub fn pca_grid(samples: &TensorArchive, cell: usize) -> Result<Option<RgbImage>> {
    let conds = sample_conditions(samples);
    let mut n = 0;
    while samples.get(&format!("image/img{n}")).is_some() {
        n += 1;
    }
    if n == 0 || conds.is_empty() {
        return Ok(None);
    }
    let gap = 4;
    let cols = conds.len() + 1;
    let mut out = RgbImage::from_pixel(
        (cols * (cell + gap) + gap) as u32,
        (n * (cell + gap) + gap) as u32,
        Rgb([255, 255, 255]),
    );
    for i in 0..n {
        let y0 = gap + i * (cell + gap);
        let img = samples.require(&format!("image/img{i}"))?;
        let [c, h, w] = img.shape[..] else {
            return Err(Error::Contract(format!("image/img{i} is not [3, h, w]")));
        };
        if c != 3 {
            return Err(Error::Contract(format!("image/img{i} has {c} channels")));
        }
        let (lo, hi) = img.data.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        blit(&mut out, gap, y0, cell, h, w, |y, x| {
            let at = |ch: usize| (img.data[(ch * h + y) * w + x] - lo) / span;
            [at(0), at(1), at(2)]
        });
        for (j, cond) in conds.iter().enumerate() {
            let x0 = gap + (j + 1) * (cell + gap);
            let Some(t) = samples.get(&format!("pca/{cond}/img{i}")) else { continue };
            let [gh, gw, 3] = t.shape[..] else {
                return Err(Error::Contract(format!("pca/{cond}/img{i} is not [rows, cols, 3]")));
            };
            blit(&mut out, x0, y0, cell, gh, gw, |y, x| {
                let p = (y * gw + x) * 3;
                [t.data[p], t.data[p + 1], t.data[p + 2]]
            });
        }
    }
    Ok(Some(out))
}

/// Nearest-neighbour upscale of an `h × w` source into a `cell²` square.
fn blit(out: &mut RgbImage, x0: usize, y0: usize, cell: usize, h: usize, w: usize, px: impl Fn(usize, usize) -> [f32; 3]) {
    let to_u8 = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    for y in 0..cell {
        for x in 0..cell {
            let [r, g, b] = px(y * h / cell, x * w / cell);
            out.put_pixel((x0 + x) as u32, (y0 + y) as u32, Rgb([to_u8(r), to_u8(g), to_u8(b)]));
        }
    }
}

fn write_text(dir: &Path, name: &str, text: &str, out: &mut PlotOutput) -> Result<()> {
    let p = dir.join(name);
    std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    out.written.push(p);
    Ok(())
}

fn skip(out: &mut PlotOutput, notice: String) {
    log::warn!("{notice}");
    out.skipped.push(notice);
}

pub fn emit_plots(report: &MetricReport, samples: Option<&TensorArchive>, dir: &Path) -> Result<PlotOutput> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = PlotOutput::default();
    for seed in seeds(report) {
        match heatmap_grid(report, seed) {
            Some(g) => write_text(
                dir,
                &format!("heatmap_seed{seed}.svg"),
                &heatmap_svg(&g, &format!("{}: delta vs full (seed {seed})", report.provenance.model)),
                &mut out,
            )?,
            None => skip(&mut out, format!("heatmap_seed{seed}: no rows with a delta vs full")),
        }
        let curves = js_curves(report, seed);
        if curves.is_empty() {
            skip(&mut out, format!("attention_js_seed{seed}: no attention_js rows"));
        } else {
            write_text(
                dir,
                &format!("attention_js_seed{seed}.svg"),
                &js_svg(&curves, &format!("attention JS vs full (seed {seed})")),
                &mut out,
            )?;
        }
        let mut conds: Vec<&str> = Vec::new();
        for r in &report.rows {
            if r.seed == seed && r.metric.starts_with("attention_flow_layer") && !conds.contains(&r.intervention.as_str()) {
                conds.push(&r.intervention);
            }
        }
        if conds.is_empty() {
            skip(&mut out, format!("attention_flow seed {seed}: no attention_flow rows"));
        }
        for cond in conds {
            let panels: Vec<(GroupKind, Vec<[f64; 3]>)> = GroupKind::ALL
                .into_iter()
                .map(|src| (src, flow_series(report, seed, cond, src)))
                .filter(|(_, s)| s.iter().any(|f| f.iter().sum::<f64>() > 0.0))
                .collect();
            write_text(
                dir,
                &format!("attention_flow_{cond}_seed{seed}.svg"),
                &flow_svg(&panels, &format!("attention flow: {cond} (seed {seed})")),
                &mut out,
            )?;
        }
    }
    match samples.map(|s| pca_grid(s, 96)).transpose()?.flatten() {
        Some(img) => {
            let p = dir.join("pca_rgb.png");
            img.save(&p)?;
            out.written.push(p);
        }
        None => skip(&mut out, "pca_rgb: no sampled activations".into()),
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::{MetricRow, Provenance};

    fn row(intervention: &str, task: &str, metric: &str, value: f64, full: f64) -> MetricRow {
        MetricRow {
            model: "m".into(),
            intervention: intervention.into(),
            task: task.into(),
            metric: metric.into(),
            value,
            ci_lo: None,
            ci_hi: None,
            delta_vs_full: (intervention != FULL).then_some(value - full),
            p_value: None,
            seed: 0,
            config_hash: "h".into(),
        }
    }

    fn report(rows: Vec<MetricRow>) -> MetricReport {
        MetricReport {
            provenance: Provenance {
                config_hash: "h".into(),
                seeds: vec![0],
                version: "v".into(),
                model: "m".into(),
                calibration_id: None,
            },
            rows,
        }
    }

    #[test]
    fn one_intervention_gives_one_cell() {
        let r = report(vec![row(FULL, "knn", "recall_at_1", 0.8, 0.8), row("zero", "knn", "recall_at_1", 0.5, 0.8)]);
        let g = heatmap_grid(&r, 0).unwrap();
        assert_eq!(g.rows.len(), 1);
        assert_eq!(g.cols, vec!["zero".to_owned()]);
        assert!((g.cells[0][0].unwrap() + 0.3).abs() < 1e-12);
        assert!(heatmap_svg(&g, "t").contains("-0.300"));
    }

    #[test]
    fn full_js_curve_is_flat_zero() {
        let rows = (0..4).map(|l| row(FULL, "geometry", &format!("attention_js_layer{l}"), 0.0, 0.0)).collect();
        let c = js_curves(&report(rows), 0);
        assert_eq!(c[FULL], (0..4).map(|l| (l, 0.0)).collect::<Vec<_>>());
    }

    #[test]
    fn flow_rows_parse_by_target() {
        let rows = vec![
            row(FULL, "geometry", "attention_flow_layer1_cls_to_registers", 0.5, 0.0),
            row(FULL, "geometry", "attention_flow_layer1_cls_to_patches", 0.3, 0.0),
            row(FULL, "geometry", "attention_flow_layer0_cls_to_cls", 1.0, 0.0),
        ];
        let s = flow_series(&report(rows), 0, FULL, GroupKind::Cls);
        assert_eq!(s, vec![[1.0, 0.0, 0.0], [0.0, 0.5, 0.3]]);
    }

    #[test]
    fn missing_rows_are_skipped_with_notice() {
        let dir = tempfile::tempdir().unwrap();
        let out = emit_plots(&report(vec![row(FULL, "knn", "recall_at_1", 0.8, 0.8)]), None, dir.path()).unwrap();
        assert!(out.written.is_empty());
        assert_eq!(out.skipped.len(), 4);
    }
}
