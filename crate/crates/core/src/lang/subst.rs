use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unbound threshold(s): {}", missing.join(", "))]
pub struct SubstError {
    pub missing: Vec<String>,
}

/// Ids of every `<$ID$>` token in `source`, in order of appearance.
pub fn threshold_tokens(source: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = source;
    while let Some(start) = rest.find("<$") {
        let after = &rest[start + 2..];
        match after.find("$>") {
            Some(end) => {
                out.push(String::from(&after[..end]));
                rest = &after[end + 2..];
            }
            None => break,
        }
    }
    out
}

/// Replace each `<$ID$>` with the decimal rendering of its knowledge value.
pub fn substitute_thresholds(source: &str, values: &BTreeMap<String, f64>) -> Result<String, SubstError> {
    let mut missing: Vec<String> = threshold_tokens(source).into_iter().filter(|id| !values.contains_key(id)).collect();
    if !missing.is_empty() {
        missing.sort();
        missing.dedup();
        return Err(SubstError { missing });
    }
    let mut out = String::with_capacity(source.len());
    let mut rest = source;
    while let Some(start) = rest.find("<$") {
        let after = &rest[start + 2..];
        let Some(end) = after.find("$>") else { break };
        out.push_str(&rest[..start]);
        out.push_str(&alloc::format!("{}", values[&after[..end]]));
        rest = &after[end + 2..];
    }
    out.push_str(rest);
    Ok(out)
}
