//! Divergence metrics, intra-class spread, activation-split saliency, cost
//! accounting and run reports.

mod costs;
mod divergence;
mod report;
mod saliency;

pub use costs::{adapter_params_per_block, backbone_params, count_costs, forward_macs, instrumented_costs, Costs};
pub use divergence::{
    domain_distribution, inter_domain_js, intra_class_divergence, js_divergence, kl_divergence, IntraClass, KL_EPS,
};
pub use report::{
    analyze_run, build_report, files, make_report, merge_bank, read_manifest, render_divergence_csv, render_ic_csv,
    render_markdown, render_saliency_csv, render_series, summarize_bank, write_json, AnalysisConfig, BankSummary,
    ErrorRow, ErrorTable, RunManifest, RunReport, SaliencyRow, MANIFEST_VERSION,
};
pub use saliency::{saliency_maps, saliency_split, SaliencyMode};
