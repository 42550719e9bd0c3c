//! Plain SVG line charts and scatter plots. Output depends only on the
//! input data, so re-emitting a figure gives identical bytes.

use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::PcaProjection;
use crate::training::EpochReport;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 150.0;
const MARGIN_T: f64 = 36.0;
const MARGIN_B: f64 = 48.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    pub dashed: bool,
}

/// Which per-epoch channel a curve plots.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Channel {
    MutualInformation,
    LostIds,
}

impl Channel {
    fn value(self, r: &EpochReport) -> f64 {
        match self {
            Channel::MutualInformation => r.diagnostics.mutual_information_nats,
            Channel::LostIds => r.diagnostics.lost_ids as f64,
        }
    }

    fn labels(self) -> (&'static str, &'static str) {
        match self {
            Channel::MutualInformation => ("Mutual information, pseudo-ID vs camera", "MI (nats)"),
            Channel::LostIds => ("Lost identities per epoch", "lost IDs"),
        }
    }
}

/// One series per run, x = epoch (1-based).
pub fn report_series(name: &str, reports: &[EpochReport], channel: Channel) -> Series {
    Series {
        name: name.to_string(),
        points: reports
            .iter()
            .map(|r| ((r.epoch + 1) as f64, channel.value(r)))
            .collect(),
        dashed: false,
    }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn extent(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        let pad = if lo.abs() > 1e-12 {
            lo.abs() * 0.1
        } else {
            1.0
        };
        return (lo - pad, hi + pad);
    }
    let pad = (hi - lo) * 0.05;
    (lo - pad, hi + pad)
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        MARGIN_L + (x - self.x.0) / (self.x.1 - self.x.0) * (WIDTH - MARGIN_L - MARGIN_R)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN_B - (y - self.y.0) / (self.y.1 - self.y.0) * (HEIGHT - MARGIN_T - MARGIN_B)
    }
}

fn header(out: &mut String, title: &str, x_label: &str, y_label: &str, frame: &Frame) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(
        out,
        r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        esc(title)
    );
    let (x0, x1) = (MARGIN_L, WIDTH - MARGIN_R);
    let (y0, y1) = (HEIGHT - MARGIN_B, MARGIN_T);
    let _ = writeln!(
        out,
        r#"<path d="M{x0},{y1} L{x0},{y0} L{x1},{y0}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let xv = frame.x.0 + t * (frame.x.1 - frame.x.0);
        let yv = frame.y.0 + t * (frame.y.1 - frame.y.0);
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            frame.px(xv),
            y0 + 16.0,
            tick(xv)
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            x0 - 6.0,
            frame.py(yv) + 4.0,
            tick(yv)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        (x0 + x1) / 2.0,
        HEIGHT - 10.0,
        esc(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text transform="translate(16,{:.2}) rotate(-90)" text-anchor="middle">{}</text>"#,
        (y0 + y1) / 2.0,
        esc(y_label)
    );
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 || (v - v.round()).abs() < 1e-9 {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

fn legend(out: &mut String, row: usize, name: &str, color: &str, dashed: bool) {
    let x = WIDTH - MARGIN_R + 12.0;
    let y = MARGIN_T + 8.0 + row as f64 * 18.0;
    let dash = if dashed {
        r#" stroke-dasharray="6,4""#
    } else {
        ""
    };
    let _ = writeln!(
        out,
        r#"<line x1="{x}" y1="{y}" x2="{}" y2="{y}" stroke="{color}" stroke-width="2"{dash}/>"#,
        x + 22.0
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}">{}</text>"#,
        x + 28.0,
        y + 4.0,
        esc(name)
    );
}

/// Line chart with a marker per point. `reference` draws horizontal dashed
/// lines, one per (name, level).
pub fn line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
    reference: &[(String, f64)],
) -> Result<String> {
    if series.iter().all(|s| s.points.is_empty()) {
        return Err(Error::invalid("nothing to plot"));
    }
    let xs = series.iter().flat_map(|s| s.points.iter().map(|p| p.0));
    let ys = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.1))
        .chain(reference.iter().map(|r| r.1));
    let frame = Frame {
        x: extent(xs),
        y: extent(ys),
    };
    let mut out = String::new();
    header(&mut out, title, x_label, y_label, &frame);
    let mut row = 0;
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let dash = if s.dashed {
            r#" stroke-dasharray="6,4""#
        } else {
            ""
        };
        let path: Vec<String> = s
            .points
            .iter()
            .filter(|p| p.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", frame.px(x), frame.py(y)))
            .collect();
        if path.len() > 1 {
            let _ = writeln!(
                out,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"{dash}/>"#,
                path.join(" ")
            );
        }
        for &(x, y) in s.points.iter().filter(|p| p.1.is_finite()) {
            let _ = writeln!(
                out,
                r#"<circle class="point" cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                frame.px(x),
                frame.py(y)
            );
        }
        legend(&mut out, row, &s.name, color, s.dashed);
        row += 1;
    }
    for (j, (name, level)) in reference.iter().enumerate() {
        let color = PALETTE[(series.len() + j) % PALETTE.len()];
        let y = frame.py(*level);
        let _ = writeln!(
            out,
            r#"<line class="reference" x1="{MARGIN_L}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="{color}" stroke-width="1.5" stroke-dasharray="6,4"/>"#,
            WIDTH - MARGIN_R
        );
        legend(&mut out, row, name, color, true);
        row += 1;
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Per-epoch curve for several runs on one axis.
pub fn report_chart(
    runs: &[(String, Vec<EpochReport>)],
    channel: Channel,
    reference: &[(String, f64)],
) -> Result<String> {
    if runs.iter().all(|(_, r)| r.is_empty()) {
        return Err(Error::invalid("no epoch reports to plot"));
    }
    let series: Vec<Series> = runs
        .iter()
        .map(|(n, r)| report_series(n, r, channel))
        .collect();
    let (title, y_label) = channel.labels();
    line_chart(title, "epoch", y_label, &series, reference)
}

/// 2-D scatter of a PCA projection, one color per label.
pub fn pca_scatter(title: &str, proj: &PcaProjection, names: &[(usize, String)]) -> Result<String> {
    if proj.points.ncols() < 2 {
        return Err(Error::invalid("scatter needs a 2-D projection"));
    }
    let frame = Frame {
        x: extent(proj.points.column(0).iter().copied()),
        y: extent(proj.points.column(1).iter().copied()),
    };
    let ev = &proj.explained_variance_ratio;
    let mut out = String::new();
    header(
        &mut out,
        title,
        &format!("PC1 ({:.1}%)", ev[0] * 100.0),
        &format!("PC2 ({:.1}%)", ev[1] * 100.0),
        &frame,
    );
    for (row, (label, name)) in names.iter().enumerate() {
        let color = PALETTE[row % PALETTE.len()];
        for (i, _) in proj.labels.iter().enumerate().filter(|(_, l)| *l == label) {
            let _ = writeln!(
                out,
                r#"<circle class="point" cx="{:.2}" cy="{:.2}" r="2.5" fill="{color}" fill-opacity="0.7"/>"#,
                frame.px(proj.points[[i, 0]]),
                frame.py(proj.points[[i, 1]])
            );
        }
        legend(&mut out, row, name, color, false);
    }
    out.push_str("</svg>\n");
    Ok(out)
}
