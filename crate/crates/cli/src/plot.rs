use std::path::Path;
use std::sync::OnceLock;

use plotters::prelude::*;
use plotters::style::{register_font, FontStyle};

use onconet::labels::ResponseLabel;
use onconet::metrics::EvalReport;

use crate::CliError;

const FONT_PATHS: [&str; 3] = [
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
];

// Text needs a registered font; without one the figure is drawn unlabeled.
fn font_available() -> bool {
    static FONT: OnceLock<bool> = OnceLock::new();
    *FONT.get_or_init(|| {
        let path = std::env::var("ONCONET_FONT")
            .ok()
            .into_iter()
            .chain(FONT_PATHS.iter().map(|s| s.to_string()))
            .find(|p| Path::new(p).is_file());
        let Some(bytes) = path.and_then(|p| std::fs::read(p).ok()) else {
            return false;
        };
        register_font("sans-serif", FontStyle::Normal, Box::leak(bytes.into_boxed_slice())).is_ok()
    })
}

fn plot_err(e: impl std::fmt::Display) -> CliError {
    CliError::data(format!("plotting failed: {e}"))
}

const CLASS_COLORS: [RGBColor; 3] = [RGBColor(214, 39, 40), RGBColor(31, 119, 180), RGBColor(44, 160, 44)];

/// Micro-averaged ROC with its bootstrap band, plus the one-vs-rest curves,
/// written as a PNG.
pub fn roc_figure(report: &EvalReport, name: &str, path: &Path) -> Result<(), CliError> {
    let (w, h) = (640u32, 640u32);
    let mut buf = vec![0u8; (w * h * 3) as usize];
    draw_roc(report, name, &mut buf, (w, h))?;
    let img = image::RgbImage::from_raw(w, h, buf).expect("buffer sized for the image");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn draw_roc(report: &EvalReport, name: &str, buf: &mut [u8], size: (u32, u32)) -> Result<(), CliError> {
    let labeled = font_available();
    let root = BitMapBackend::with_buffer(buf, size).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut builder = ChartBuilder::on(&root);
    builder.margin(20);
    if labeled {
        let title = match report.auroc_micro {
            Some(a) => format!("{name}: micro-averaged AUROC {a:.3}"),
            None => format!("{name}: micro-averaged ROC"),
        };
        builder
            .caption(title, ("sans-serif", 22))
            .x_label_area_size(45)
            .y_label_area_size(55);
    }
    let mut chart = builder.build_cartesian_2d(0f64..1f64, 0f64..1f64).map_err(plot_err)?;
    let mut mesh = chart.configure_mesh();
    if labeled {
        mesh.x_desc("False positive rate").y_desc("True positive rate");
    } else {
        mesh.disable_x_axis().disable_y_axis();
    }
    mesh.light_line_style(WHITE.mix(0.0)).draw().map_err(plot_err)?;

    if let Some(band) = &report.micro_band {
        let mut poly: Vec<(f64, f64)> = band.fpr.iter().copied().zip(band.upper.iter().copied()).collect();
        poly.extend(band.fpr.iter().copied().zip(band.lower.iter().copied()).rev());
        chart
            .draw_series(std::iter::once(Polygon::new(poly, RGBColor(180, 180, 180).mix(0.5).filled())))
            .map_err(plot_err)?;
    }
    chart
        .draw_series(LineSeries::new([(0.0, 0.0), (1.0, 1.0)], BLACK.mix(0.3).stroke_width(1)))
        .map_err(plot_err)?;
    for c in ResponseLabel::ALL {
        let pts = report.roc_points.get(c);
        if pts.is_empty() {
            continue;
        }
        let s = chart
            .draw_series(LineSeries::new(pts.iter().copied(), CLASS_COLORS[c.index()].stroke_width(1)))
            .map_err(plot_err)?;
        if labeled {
            let auc = report.auroc_per_class.get(c).map_or("n/a".to_string(), |a| format!("{a:.3}"));
            let color = CLASS_COLORS[c.index()];
            s.label(format!("{} ({auc})", c.as_str()))
                .legend(move |(x, y)| PathElement::new([(x, y), (x + 18, y)], color.stroke_width(2)));
        }
    }
    let s = chart
        .draw_series(LineSeries::new(report.micro_roc.iter().copied(), BLACK.stroke_width(3)))
        .map_err(plot_err)?;
    if labeled {
        s.label("micro average")
            .legend(|(x, y)| PathElement::new([(x, y), (x + 18, y)], BLACK.stroke_width(3)));
        chart
            .configure_series_labels()
            .position(SeriesLabelPosition::LowerRight)
            .background_style(WHITE.mix(0.85))
            .border_style(BLACK.mix(0.4))
            .label_font(("sans-serif", 15))
            .draw()
            .map_err(plot_err)?;
    }
    root.present().map_err(plot_err)
}
