//! File emission: CSV writers for every result type and self-contained SVG
//! figures (heat maps, summary-function panels, envelope plots).

use crate::counts::{CountsTable, GeeFit};
use crate::envelopes::EnvelopeResult;
use crate::field::ScalarField;
use crate::groupstats::GroupedCurves;
use crate::intensity::RiskSurface;
use crate::secondorder::SummaryFunction;
use std::fmt::Write as _;
use std::io;

/// `x,y,value,inside` rows over the full bounding-box grid.
pub fn field_to_csv<W: io::Write>(field: &ScalarField, out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["x", "y", "value", "inside"])?;
    for iy in 0..field.ny() {
        for ix in 0..field.nx() {
            let c = field.cell_center(ix, iy);
            match field.get(ix, iy) {
                Some(v) => w.write_record([
                    format!("{}", c.x),
                    format!("{}", c.y),
                    format!("{}", v),
                    "1".into(),
                ])?,
                None => w.write_record([
                    format!("{}", c.x),
                    format!("{}", c.y),
                    String::new(),
                    "0".into(),
                ])?,
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// `r,value,theoretical` rows.
pub fn summary_to_csv<W: io::Write>(f: &SummaryFunction, out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["r", "value", "theoretical"])?;
    for q in 0..f.r.len() {
        let fmt = |v: f64| if v.is_nan() { String::new() } else { format!("{v}") };
        w.write_record([format!("{}", f.r[q]), fmt(f.values[q]), fmt(f.theoretical[q])])?;
    }
    w.flush()?;
    Ok(())
}

/// `patient,group,r,value` rows.
pub fn grouped_curves_to_csv<W: io::Write>(g: &GroupedCurves, out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["patient", "group", "r", "value"])?;
    for (c, curve) in g.curves.iter().enumerate() {
        for (q, &r) in g.r.iter().enumerate() {
            let v = curve[q];
            w.write_record([
                g.patients[c].clone(),
                g.groups[c].clone(),
                format!("{r}"),
                if v.is_nan() { String::new() } else { format!("{v}") },
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn counts_to_csv<W: io::Write>(t: &CountsTable, out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["patient", "immune", "tissue", "count", "offset"])?;
    for r in &t.rows {
        w.write_record([
            r.patient.clone(),
            r.immune.clone(),
            r.tissue.clone(),
            format!("{}", r.count),
            format!("{}", r.offset),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn gee_to_csv<W: io::Write>(fit: &GeeFit, out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["coefficient", "estimate", "naive_se", "robust_se", "p_value", "stars"])?;
    for row in crate::counts::wald_table(fit) {
        w.write_record([
            row.name,
            format!("{}", row.estimate),
            format!("{}", row.naive_se),
            format!("{}", row.robust_se),
            format!("{}", row.p_value),
            row.stars.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// SVG output
// ---------------------------------------------------------------------------

const PLOT_W: f64 = 640.0;
const PLOT_H: f64 = 480.0;
const MARGIN: f64 = 52.0;

fn svg_header(width: f64, height: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n"
    )
}

/// Blue-to-yellow ramp for heat maps.
fn colour(t: f64) -> String {
    let stops = [
        (68.0, 1.0, 84.0),
        (59.0, 82.0, 139.0),
        (33.0, 145.0, 140.0),
        (94.0, 201.0, 98.0),
        (253.0, 231.0, 37.0),
    ];
    let t = t.clamp(0.0, 1.0) * (stops.len() - 1) as f64;
    let k = (t.floor() as usize).min(stops.len() - 2);
    let f = t - k as f64;
    let mix = |a: f64, b: f64| (a + f * (b - a)).round() as u8;
    format!(
        "rgb({},{},{})",
        mix(stops[k].0, stops[k + 1].0),
        mix(stops[k].1, stops[k + 1].1),
        mix(stops[k].2, stops[k + 1].2)
    )
}

/// Heat map of a field, with the window boundary and a value legend.
pub fn field_to_svg(field: &ScalarField, title: &str) -> String {
    let (lo, hi) = field.range().unwrap_or((0.0, 1.0));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let bb = field.window().bbox();
    let scale = ((PLOT_W - 2.0 * MARGIN) / bb.width()).min((PLOT_H - 2.0 * MARGIN) / bb.height());
    let to_x = |x: f64| MARGIN + (x - bb.x0) * scale;
    let to_y = |y: f64| PLOT_H - MARGIN - (y - bb.y0) * scale;
    let mut svg = svg_header(PLOT_W + 90.0, PLOT_H);
    let _ = write!(svg, "<text x=\"{MARGIN}\" y=\"20\">{title}</text>");
    let cw = field.cell_width() * scale;
    let ch = field.cell_height() * scale;
    for (ix, iy, v) in field.iter_inside() {
        let c = field.cell_center(ix, iy);
        let _ = write!(
            svg,
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{}\"/>",
            to_x(c.x) - cw / 2.0,
            to_y(c.y) - ch / 2.0,
            cw + 0.5,
            ch + 0.5,
            colour((v - lo) / span)
        );
    }
    // window outline
    let pts: String = field
        .window()
        .vertices()
        .iter()
        .map(|p| format!("{:.2},{:.2} ", to_x(p.x), to_y(p.y)))
        .collect();
    let _ = write!(
        svg,
        "<polygon points=\"{pts}\" fill=\"none\" stroke=\"black\" stroke-width=\"1\"/>"
    );
    // legend bar
    for k in 0..100 {
        let t = k as f64 / 99.0;
        let y = PLOT_H - MARGIN - t * (PLOT_H - 2.0 * MARGIN);
        let _ = write!(
            svg,
            "<rect x=\"{:.1}\" y=\"{:.2}\" width=\"16\" height=\"{:.2}\" fill=\"{}\"/>",
            PLOT_W + 10.0,
            y - (PLOT_H - 2.0 * MARGIN) / 99.0,
            (PLOT_H - 2.0 * MARGIN) / 99.0 + 0.5,
            colour(t)
        );
    }
    let _ = write!(
        svg,
        "<text x=\"{:.1}\" y=\"{:.1}\">{:.3}</text><text x=\"{:.1}\" y=\"{:.1}\">{:.3}</text>",
        PLOT_W + 30.0,
        PLOT_H - MARGIN,
        lo,
        PLOT_W + 30.0,
        MARGIN + 8.0,
        hi
    );
    svg.push_str("</svg>\n");
    svg
}

/// Heat map of the log-risk surface with the tolerance contour at the
/// stored level drawn on top.
pub fn risk_to_svg(risk: &RiskSurface, title: &str) -> String {
    let mut svg = field_to_svg(&risk.log_risk, title);
    let closing = svg.rfind("</svg>").unwrap();
    svg.truncate(closing);
    let field = &risk.tolerance;
    let bb = field.window().bbox();
    let scale = ((PLOT_W - 2.0 * MARGIN) / bb.width()).min((PLOT_H - 2.0 * MARGIN) / bb.height());
    let to_x = |x: f64| MARGIN + (x - bb.x0) * scale;
    let to_y = |y: f64| PLOT_H - MARGIN - (y - bb.y0) * scale;
    // Cell-edge contour of {p < level}: draw borders between significant
    // and non-significant cells.
    let level = risk.contour_level;
    let sig = |ix: i64, iy: i64| -> bool {
        if ix < 0 || iy < 0 || ix >= field.nx() as i64 || iy >= field.ny() as i64 {
            return false;
        }
        field
            .get(ix as usize, iy as usize)
            .map(|p| p < level)
            .unwrap_or(false)
    };
    for iy in 0..field.ny() as i64 {
        for ix in 0..field.nx() as i64 {
            if !sig(ix, iy) {
                continue;
            }
            let c = field.cell_center(ix as usize, iy as usize);
            let hw = field.cell_width() / 2.0;
            let hh = field.cell_height() / 2.0;
            let mut seg = |x1: f64, y1: f64, x2: f64, y2: f64| {
                let _ = write!(
                    svg,
                    "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\" stroke-width=\"1.2\"/>",
                    to_x(x1), to_y(y1), to_x(x2), to_y(y2)
                );
            };
            if !sig(ix - 1, iy) {
                seg(c.x - hw, c.y - hh, c.x - hw, c.y + hh);
            }
            if !sig(ix + 1, iy) {
                seg(c.x + hw, c.y - hh, c.x + hw, c.y + hh);
            }
            if !sig(ix, iy - 1) {
                seg(c.x - hw, c.y - hh, c.x + hw, c.y - hh);
            }
            if !sig(ix, iy + 1) {
                seg(c.x - hw, c.y + hh, c.x + hw, c.y + hh);
            }
        }
    }
    svg.push_str("</svg>\n");
    svg
}

struct Axes {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Axes {
    fn to_x(&self, x: f64) -> f64 {
        MARGIN + (x - self.x0) / (self.x1 - self.x0) * (PLOT_W - 2.0 * MARGIN)
    }

    fn to_y(&self, y: f64) -> f64 {
        PLOT_H - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (PLOT_H - 2.0 * MARGIN)
    }

    fn frame(&self, svg: &mut String, title: &str, xlab: &str) {
        let _ = write!(svg, "<text x=\"{MARGIN}\" y=\"20\">{title}</text>");
        let _ = write!(
            svg,
            "<rect x=\"{MARGIN}\" y=\"{MARGIN}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"none\" stroke=\"#444\"/>",
            PLOT_W - 2.0 * MARGIN,
            PLOT_H - 2.0 * MARGIN
        );
        for k in 0..=4 {
            let fx = self.x0 + (self.x1 - self.x0) * k as f64 / 4.0;
            let fy = self.y0 + (self.y1 - self.y0) * k as f64 / 4.0;
            let _ = write!(
                svg,
                "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{:.3}</text>",
                self.to_x(fx),
                PLOT_H - MARGIN + 16.0,
                fx
            );
            let _ = write!(
                svg,
                "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{:.3}</text>",
                MARGIN - 6.0,
                self.to_y(fy) + 4.0,
                fy
            );
        }
        let _ = write!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{xlab}</text>",
            PLOT_W / 2.0,
            PLOT_H - 12.0
        );
    }
}

fn finite_range(series: &[&[f64]]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for s in series {
        for &v in *s {
            if v.is_finite() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
    }
    if !lo.is_finite() || hi <= lo {
        (0.0, 1.0)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

fn polyline(svg: &mut String, xs: &[f64], ys: &[f64], ax: &Axes, style: &str) {
    let mut path = String::new();
    let mut pen_down = false;
    for (x, y) in xs.iter().zip(ys) {
        if y.is_finite() {
            let cmd = if pen_down { 'L' } else { 'M' };
            let _ = write!(path, "{}{:.2} {:.2} ", cmd, ax.to_x(*x), ax.to_y(*y));
            pen_down = true;
        } else {
            pen_down = false;
        }
    }
    let _ = write!(svg, "<path d=\"{path}\" fill=\"none\" {style}/>");
}

/// Line plot of a summary function with its benchmark curve.
pub fn summary_to_svg(f: &SummaryFunction, title: &str) -> String {
    let (lo, hi) = finite_range(&[&f.values, &f.theoretical]);
    let ax = Axes {
        x0: 0.0,
        x1: *f.r.last().unwrap(),
        y0: lo,
        y1: hi,
    };
    let mut svg = svg_header(PLOT_W, PLOT_H);
    ax.frame(&mut svg, title, "r");
    polyline(
        &mut svg,
        &f.r,
        &f.theoretical,
        &ax,
        "stroke=\"#888\" stroke-dasharray=\"5 4\" stroke-width=\"1.2\"",
    );
    polyline(&mut svg, &f.r, &f.values, &ax, "stroke=\"#d43\" stroke-width=\"1.8\"");
    let _ = write!(
        svg,
        "<text x=\"{:.1}\" y=\"{:.1}\" fill=\"#d43\">estimate</text>\
         <text x=\"{:.1}\" y=\"{:.1}\" fill=\"#888\">benchmark</text>",
        PLOT_W - MARGIN - 90.0,
        MARGIN + 14.0,
        PLOT_W - MARGIN - 90.0,
        MARGIN + 28.0
    );
    svg.push_str("</svg>\n");
    svg
}

/// Envelope plot: shaded central region, observed curve, exit markers.
pub fn envelope_to_svg(res: &EnvelopeResult, title: &str) -> String {
    let (lo, hi) = finite_range(&[&res.observed, &res.lower, &res.upper]);
    let ax = Axes {
        x0: res.r.first().copied().unwrap_or(0.0),
        x1: res.r.last().copied().unwrap_or(1.0),
        y0: lo,
        y1: hi,
    };
    let mut svg = svg_header(PLOT_W, PLOT_H);
    ax.frame(
        &mut svg,
        &format!("{title} (p = {:.4})", res.p_value),
        "r",
    );
    // shaded region as a closed band over contiguous defined stretches
    let mut band = String::new();
    let mut seg: Vec<usize> = Vec::new();
    let flush = |seg: &mut Vec<usize>, band: &mut String| {
        if seg.len() < 2 {
            seg.clear();
            return;
        }
        let mut d = String::from("M");
        for &q in seg.iter() {
            let _ = write!(d, "{:.2} {:.2} L", ax.to_x(res.r[q]), ax.to_y(res.upper[q]));
        }
        for &q in seg.iter().rev() {
            let _ = write!(d, "{:.2} {:.2} L", ax.to_x(res.r[q]), ax.to_y(res.lower[q]));
        }
        d.pop();
        let _ = write!(
            band,
            "<path d=\"{d}Z\" fill=\"#bbb\" fill-opacity=\"0.6\" stroke=\"none\"/>"
        );
        seg.clear();
    };
    for q in 0..res.r.len() {
        if res.lower[q].is_finite() && res.upper[q].is_finite() {
            seg.push(q);
        } else {
            flush(&mut seg, &mut band);
        }
    }
    flush(&mut seg, &mut band);
    svg.push_str(&band);
    polyline(&mut svg, &res.r, &res.observed, &ax, "stroke=\"#d43\" stroke-width=\"1.8\"");
    for &rx in &res.exit_distances {
        let q = res.r.iter().position(|&r| r == rx).unwrap();
        let _ = write!(
            svg,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"#d43\"/>",
            ax.to_x(rx),
            ax.to_y(res.observed[q])
        );
    }
    let _ = write!(
        svg,
        "<text x=\"{:.1}\" y=\"{:.1}\" fill=\"#d43\">observed</text>\
         <text x=\"{:.1}\" y=\"{:.1}\" fill=\"#777\">central region ({:.0}%)</text>",
        PLOT_W - MARGIN - 150.0,
        MARGIN + 14.0,
        PLOT_W - MARGIN - 150.0,
        MARGIN + 28.0,
        100.0 * (1.0 - res.alpha)
    );
    svg.push_str("</svg>\n");
    svg
}

/// Group mean curves with the permutation central region split per group
/// (panels side by side).
pub fn group_means_to_svg(
    grouped: &GroupedCurves,
    res: &EnvelopeResult,
    title: &str,
) -> String {
    let means = grouped.group_means();
    let n_groups = means.len();
    let d = grouped.r.len();
    let panel_w = 300.0;
    let panel_h = 260.0;
    let total_w = panel_w * n_groups as f64 + 40.0;
    let mut svg = svg_header(total_w, panel_h + 70.0);
    let _ = write!(svg, "<text x=\"20\" y=\"20\">{title} (p = {:.4})</text>", res.p_value);
    let mut all: Vec<&[f64]> = vec![&res.lower, &res.upper];
    for (_, m) in &means {
        all.push(m);
    }
    let (lo, hi) = finite_range(&all);
    for (g, (name, mean)) in means.iter().enumerate() {
        let x_off = 20.0 + g as f64 * panel_w;
        let ax_x = |r: f64| {
            x_off
                + (r - grouped.r[0]) / (grouped.r[d - 1] - grouped.r[0]).max(1e-300)
                    * (panel_w - 50.0)
        };
        let ax_y = |v: f64| 40.0 + (hi - v) / (hi - lo) * panel_h;
        let _ = write!(
            svg,
            "<rect x=\"{x_off}\" y=\"40\" width=\"{:.1}\" height=\"{panel_h}\" fill=\"none\" stroke=\"#444\"/>",
            panel_w - 50.0
        );
        let _ = write!(
            svg,
            "<text x=\"{:.1}\" y=\"34\" text-anchor=\"middle\">{name}</text>",
            x_off + (panel_w - 50.0) / 2.0
        );
        // the region block for this group sits at columns [g*d, (g+1)*d)
        let mut band = String::from("M");
        let mut ok = false;
        for q in 0..d {
            let col = g * d + q;
            if col < res.upper.len() && res.upper[col].is_finite() {
                let _ = write!(band, "{:.2} {:.2} L", ax_x(grouped.r[q]), ax_y(res.upper[col]));
                ok = true;
            }
        }
        for q in (0..d).rev() {
            let col = g * d + q;
            if col < res.lower.len() && res.lower[col].is_finite() {
                let _ = write!(band, "{:.2} {:.2} L", ax_x(grouped.r[q]), ax_y(res.lower[col]));
            }
        }
        band.pop();
        if ok {
            let _ = write!(
                svg,
                "<path d=\"{band}Z\" fill=\"#bbb\" fill-opacity=\"0.6\"/>"
            );
        }
        let mut path = String::from("M");
        for (q, &m) in mean.iter().enumerate() {
            if m.is_finite() {
                let _ = write!(path, "{:.2} {:.2} L", ax_x(grouped.r[q]), ax_y(m));
            }
        }
        path.pop();
        let _ = write!(
            svg,
            "<path d=\"{path}\" fill=\"none\" stroke=\"#d43\" stroke-width=\"1.6\"/>"
        );
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::GridSpec;
    use crate::geometry::Window;

    #[test]
    fn field_csv_has_inside_flags() {
        let w = Window::try_new(vec![
            crate::geometry::Point2::new(0.0, 0.0),
            crate::geometry::Point2::new(1.0, 0.0),
            crate::geometry::Point2::new(0.0, 1.0),
        ])
        .unwrap();
        let f = ScalarField::from_fn(&w, GridSpec::square(8), |p| p.x);
        let mut buf = Vec::new();
        field_to_csv(&f, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("x,y,value,inside"));
        assert!(text.contains(",1\n") && text.contains(",0\n"));
        assert_eq!(text.lines().count(), 65);
    }

    #[test]
    fn svg_outputs_are_wellformed() {
        let w = Window::rectangle(0.0, 0.0, 1.0, 1.0).unwrap();
        let f = ScalarField::from_fn(&w, GridSpec::square(16), |p| p.x + p.y);
        let svg = field_to_svg(&f, "field");
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.matches("<rect").count() > 250);
    }
}
