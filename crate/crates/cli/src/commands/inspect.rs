use std::fmt::Write as _;
use std::io::Write;

use wsod_core::embedding::{compute_pmi, compute_ppmi, count_cooccurrences, fit_embedding, format_matrix};
use wsod_core::network::{label_vector, TrainingSample};

use super::{emit, load_data, InspectArgs};
use crate::CliResult;

pub(crate) fn inspect_embedding(args: &InspectArgs, out: &mut dyn Write) -> CliResult<()> {
    let data = load_data(&args.data)?;
    let spec = args.labels.spec(data.class_count)?;
    let labels = data
        .split(args.split)
        .iter()
        .map(|s| label_vector(&TrainingSample::from(s), &spec).map(|v| v.bits().to_vec()))
        .collect::<wsod_core::Result<Vec<_>>>()?;
    let table = count_cooccurrences(&labels)?;
    let pmi = compute_pmi(&table);
    let ppmi = compute_ppmi(&pmi);
    let model = fit_embedding(&ppmi)?;
    let n = table.class_dim();

    let mut text = String::new();
    let _ = writeln!(text, "dim={n} units={} split={} labels={}", table.unit_count(), args.split, args.labels);
    text.push_str("marginals:");
    for i in 0..n {
        let _ = write!(text, " {}", table.marginal(i));
    }
    text.push_str("\njoint counts:\n");
    for i in 0..n {
        let row: Vec<String> = (0..n).map(|j| table.joint(i, j).to_string()).collect();
        let _ = writeln!(text, "{}", row.join(" "));
    }
    text.push_str("PMI (undefined entries shown as nan):\n");
    text.push_str(&format_matrix(&pmi.values.map_with_location(|i, j, v| if pmi.defined[(i, j)] { v } else { f64::NAN }), 4));
    text.push_str("PPMI:\n");
    text.push_str(&format_matrix(&ppmi, 4));
    text.push_str("eigenvalues:");
    for v in model.eigenvalues().iter() {
        let _ = write!(text, " {v:.6}");
    }
    let _ = writeln!(text, "\nclamped_mass={:.6e}", model.clamped_mass());
    emit(out, &text)
}
