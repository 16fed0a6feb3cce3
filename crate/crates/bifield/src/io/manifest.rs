//! Run manifests: sorted key-value text capturing everything needed to
//! reproduce a run byte for byte.

/// Render sorted `key: value` lines.
pub fn manifest_text(entries: &[(String, String)]) -> String {
    let mut sorted: Vec<&(String, String)> = entries.iter().collect();
    sorted.sort();
    let mut s = String::new();
    for (k, v) in sorted {
        s.push_str(&format!("{k}: {v}\n"));
    }
    s
}
