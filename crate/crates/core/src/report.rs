//! Figures without an imaging dependency: SVG scatter and box plots, and
//! binary PPM renders of nodal fields.

use std::fmt::Write;

use crate::eval::order_statistic;
use crate::meshgen::Mesh;

/// Box-plot statistics with whiskers at the most extreme values within
/// 1.5 interquartile ranges of the box.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxStats {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub whisker_lo: f64,
    pub whisker_hi: f64,
    pub outliers: Vec<f64>,
}

pub fn box_stats(values: &[f64]) -> Option<BoxStats> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let (q1, median, q3) = (order_statistic(&v, 0.25), order_statistic(&v, 0.5), order_statistic(&v, 0.75));
    let iqr = q3 - q1;
    let (lo, hi) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let inside: Vec<f64> = v.iter().copied().filter(|&x| x >= lo && x <= hi).collect();
    Some(BoxStats {
        q1,
        median,
        q3,
        whisker_lo: inside[0],
        whisker_hi: inside[inside.len() - 1],
        outliers: v.iter().copied().filter(|&x| x < lo || x > hi).collect(),
    })
}

const W: f64 = 480.0;
const H: f64 = 360.0;
const PAD: f64 = 50.0;

fn svg_open(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle">{}</text>"#, W / 2.0, escape(title));
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Linear map from data range to pixel range; degenerate ranges are widened.
#[derive(Clone, Copy)]
struct Axis {
    lo: f64,
    hi: f64,
    p0: f64,
    p1: f64,
}

impl Axis {
    fn new(lo: f64, hi: f64, p0: f64, p1: f64) -> Self {
        let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
        Axis { lo, hi, p0, p1 }
    }

    fn map(&self, v: f64) -> f64 {
        self.p0 + (v - self.lo) / (self.hi - self.lo) * (self.p1 - self.p0)
    }
}

fn frame(s: &mut String, x: Axis, y: Axis, xlabel: &str, ylabel: &str) {
    let _ = writeln!(s, r#"<rect x="{PAD}" y="{PAD}" width="{}" height="{}" fill="none" stroke="black"/>"#, W - 2.0 * PAD, H - 2.0 * PAD);
    for (v, anchor) in [(y.lo, "end"), (y.hi, "end")] {
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="{anchor}">{:.3}</text>"#, PAD - 4.0, y.map(v) + 4.0, v);
    }
    for v in [x.lo, x.hi] {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{:.3e}</text>"#, x.map(v), H - PAD + 16.0, v);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 8.0, escape(xlabel));
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(ylabel)
    );
}

/// Predicted against actual values with the identity line.
pub fn scatter_svg(title: &str, truth: &[f64], pred: &[f64]) -> String {
    let lo = truth.iter().chain(pred).copied().fold(f64::INFINITY, f64::min);
    let hi = truth.iter().chain(pred).copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (0.0, 1.0) };
    let x = Axis::new(lo, hi, PAD, W - PAD);
    let y = Axis::new(lo, hi, H - PAD, PAD);
    let mut s = svg_open(title);
    frame(&mut s, x, y, "actual", "predicted");
    let _ = writeln!(
        s,
        r#"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="red"/>"#,
        x.map(x.lo),
        y.map(x.lo),
        x.map(x.hi),
        y.map(x.hi)
    );
    for (t, p) in truth.iter().zip(pred) {
        let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="1.2" fill="steelblue" fill-opacity="0.5"/>"#, x.map(*t), y.map(*p));
    }
    s.push_str("</svg>\n");
    s
}

/// One box per labelled group.
pub fn box_plot_svg(title: &str, ylabel: &str, groups: &[(String, Vec<f64>)]) -> String {
    let all: Vec<f64> = groups.iter().flat_map(|g| g.1.iter().copied()).collect();
    let lo = all.iter().copied().fold(f64::INFINITY, f64::min).min(0.0);
    let hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max).max(1.0);
    let y = Axis::new(lo, hi, H - PAD, PAD);
    let mut s = svg_open(title);
    let _ = writeln!(s, r#"<rect x="{PAD}" y="{PAD}" width="{}" height="{}" fill="none" stroke="black"/>"#, W - 2.0 * PAD, H - 2.0 * PAD);
    for v in [y.lo, y.hi] {
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{:.2}</text>"#, PAD - 4.0, y.map(v) + 4.0, v);
    }
    let _ = writeln!(s, r#"<text x="14" y="{0}" text-anchor="middle" transform="rotate(-90 14 {0})">{1}</text>"#, H / 2.0, escape(ylabel));
    let slot = (W - 2.0 * PAD) / groups.len().max(1) as f64;
    for (i, (label, values)) in groups.iter().enumerate() {
        let cx = PAD + slot * (i as f64 + 0.5);
        let _ = writeln!(s, r#"<text x="{cx:.1}" y="{}" text-anchor="middle">{}</text>"#, H - PAD + 16.0, escape(label));
        let Some(b) = box_stats(values) else { continue };
        let half = slot * 0.25;
        let _ = writeln!(
            s,
            r#"<line x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="black"/>"#,
            y.map(b.whisker_lo),
            y.map(b.whisker_hi)
        );
        let _ = writeln!(
            s,
            r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="lightsteelblue" stroke="black"/>"#,
            cx - half,
            y.map(b.q3),
            2.0 * half,
            y.map(b.q1) - y.map(b.q3)
        );
        let _ = writeln!(
            s,
            r#"<line x1="{:.1}" y1="{2:.1}" x2="{:.1}" y2="{2:.1}" stroke="black" stroke-width="2"/>"#,
            cx - half,
            cx + half,
            y.map(b.median)
        );
        for o in &b.outliers {
            let _ = writeln!(s, r#"<circle cx="{cx:.1}" cy="{:.1}" r="2.5" fill="none" stroke="black"/>"#, y.map(*o));
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Values linearly interpolated over the mesh on a square pixel grid over
/// the unit square. Pixels outside every triangle are `None`. Row 0 is the top.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub size: usize,
    pub values: Vec<Option<f64>>,
}

pub fn rasterize(mesh: &Mesh, values: &[f64], size: usize) -> Raster {
    let mut out = vec![None; size * size];
    let px = |i: usize| (i as f64 + 0.5) / size as f64;
    for tri in &mesh.tris {
        let [a, b, c] = tri.map(|v| mesh.nodes[v]);
        let det = (b - a).cross(c - a);
        if det == 0.0 {
            continue;
        }
        let (x0, x1) = (a.x.min(b.x).min(c.x), a.x.max(b.x).max(c.x));
        let (y0, y1) = (a.y.min(b.y).min(c.y), a.y.max(b.y).max(c.y));
        let cols = ((x0 * size as f64).floor().max(0.0) as usize)..((x1 * size as f64).ceil().min(size as f64) as usize);
        let rows = ((y0 * size as f64).floor().max(0.0) as usize)..((y1 * size as f64).ceil().min(size as f64) as usize);
        for j in rows {
            for i in cols.clone() {
                let p = crate::geometry::pt(px(i), px(j));
                let l1 = (p - a).cross(c - a) / det;
                let l2 = (b - a).cross(p - a) / det;
                let l0 = 1.0 - l1 - l2;
                if l0 >= -1e-12 && l1 >= -1e-12 && l2 >= -1e-12 {
                    let v = l0 * values[tri[0]] + l1 * values[tri[1]] + l2 * values[tri[2]];
                    out[(size - 1 - j) * size + i] = Some(v);
                }
            }
        }
    }
    Raster { size, values: out }
}

/// Blue-to-red ramp through white at the middle of the range.
fn color(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let (r, g, b) = if t < 0.5 {
        let u = t * 2.0;
        (u, u, 1.0)
    } else {
        let u = (t - 0.5) * 2.0;
        (1.0, 1.0 - u, 1.0 - u)
    };
    [(r * 255.0).round() as u8, (g * 255.0).round() as u8, (b * 255.0).round() as u8]
}

/// Binary PPM with values mapped from `[lo, hi]`; empty pixels are grey.
pub fn to_ppm(r: &Raster, lo: f64, hi: f64) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", r.size, r.size).into_bytes();
    let span = if hi > lo { hi - lo } else { 1.0 };
    for v in &r.values {
        out.extend_from_slice(&match v {
            Some(x) => color((x - lo) / span),
            None => [128, 128, 128],
        });
    }
    out
}

/// Truth, prediction and absolute difference rendered with one colour scale.
/// The difference is drawn as `lo + |pred - truth|`, so zero error shows the
/// bottom of the scale.
pub fn field_triptych(mesh: &Mesh, truth: &[f64], pred: &[f64], size: usize) -> [(Raster, Vec<u8>); 3] {
    let lo = truth.iter().chain(pred).copied().fold(f64::INFINITY, f64::min);
    let hi = truth.iter().chain(pred).copied().fold(f64::NEG_INFINITY, f64::max);
    let diff: Vec<f64> = truth.iter().zip(pred).map(|(t, p)| (p - t).abs()).collect();
    let shifted: Vec<f64> = diff.iter().map(|d| lo + d).collect();
    let rt = rasterize(mesh, truth, size);
    let rp = rasterize(mesh, pred, size);
    let rd = rasterize(mesh, &diff, size);
    let img = [to_ppm(&rt, lo, hi), to_ppm(&rp, lo, hi), to_ppm(&rasterize(mesh, &shifted, size), lo, hi)];
    let [it, ip, id] = img;
    [(rt, it), (rp, ip), (rd, id)]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Shape;
    use crate::meshgen::triangulate;

    #[test]
    fn box_stats_with_outlier() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0, 100.0];
        let b = box_stats(&v).unwrap();
        assert_eq!((b.q1, b.median, b.q3), (2.0, 3.0, 4.0));
        assert_eq!(b.outliers, vec![100.0]);
        assert_eq!((b.whisker_lo, b.whisker_hi), (1.0, 5.0));
        assert!(box_stats(&[]).is_none());
    }

    #[test]
    fn raster_reproduces_linear_field() {
        let mesh = triangulate(&Shape::solid(), 0.2).unwrap();
        let f: Vec<f64> = mesh.nodes.iter().map(|p| 2.0 * p.x - p.y).collect();
        let r = rasterize(&mesh, &f, 20);
        for (k, v) in r.values.iter().enumerate() {
            let (row, col) = (k / 20, k % 20);
            let (x, y) = ((col as f64 + 0.5) / 20.0, 1.0 - (row as f64 + 0.5) / 20.0);
            assert!((v.unwrap() - (2.0 * x - y)).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_prediction_has_zero_difference() {
        let mesh = triangulate(&Shape::solid(), 0.25).unwrap();
        let f: Vec<f64> = mesh.nodes.iter().map(|p| p.x * p.y).collect();
        let [(rt, _), (rp, _), (rd, dimg)] = field_triptych(&mesh, &f, &f, 16);
        assert_eq!(rt, rp);
        assert!(rd.values.iter().all(|v| v.is_none_or(|d| d == 0.0)));
        let header = b"P6\n16 16\n255\n".len();
        assert_eq!(dimg.len(), header + 16 * 16 * 3);
        assert!(dimg[header..].chunks(3).all(|px| px == color(0.0)));
    }

    #[test]
    fn svg_outputs_are_well_formed() {
        let s = scatter_svg("a < b", &[1.0, 2.0], &[1.0, 2.0]);
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        assert!(s.contains("a &lt; b"));
        assert_eq!(s.matches("<circle").count(), 2);
        let b = box_plot_svg("r2", "R²", &[("train".into(), vec![0.9, 0.8, -3.0, 0.85, 0.95]), ("empty".into(), vec![])]);
        assert!(b.contains("train") && b.contains("empty"));
        assert_eq!(b.matches("<circle").count(), 1);
    }
}
