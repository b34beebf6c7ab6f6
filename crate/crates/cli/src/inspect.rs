//! `cmow inspect-checkpoint`: header, sections and metadata of a checkpoint.

use std::path::Path;

use cmow_core::checkpoint::{inspect_checkpoint, CheckpointInfo};
use cmow_core::Result;

use crate::report::text_table;

pub fn describe(info: &CheckpointInfo) -> String {
    let mut s = format!(
        "kind {}\nd {}\nd_vec {}\nn_vocab {}\nprecision {:?}\nembedding parameters {}\n\n",
        info.kind, info.d, info.d_vec, info.n_vocab, info.precision, info.embedding_parameters
    );
    let rows: Vec<Vec<String>> = info
        .sections
        .iter()
        .map(|(name, bytes, params)| vec![name.clone(), bytes.to_string(), params.to_string()])
        .collect();
    s.push_str(&text_table(&["section", "bytes", "parameters"], &rows));
    if !info.metadata.is_null() {
        s.push('\n');
        s.push_str(&serde_json::to_string_pretty(&info.metadata).expect("json"));
        s.push('\n');
    }
    s
}

pub fn run(path: &Path) -> Result<String> {
    Ok(describe(&inspect_checkpoint(path)?))
}
