//! Penalty-path sweeps, replicate spreads and selection-diagram output.

mod emit;
mod replicate;
mod svg;
mod sweep;

pub use emit::{
    diagram_rows, emit_diagram, read_diagram_csv, svg_name, write_diagram_csv, DiagramRow, Format,
    Manifest, OutputFile, DIAGRAM_HEADER,
};
pub use replicate::{
    empirical_variance, replicate_seeds, sample_sd, EmpiricalPanel, EmpiricalResult,
};
pub use svg::render_panel_svg;
pub use sweep::{
    sweep, sweep_with_fit, GammaPanel, LambdaGrid, SweepConfig, SweepPoint, SweepResult,
};
