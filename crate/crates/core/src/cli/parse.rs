//! Value syntaxes shared by several commands.

use std::collections::BTreeSet;
use std::path::PathBuf;

use neuromed::energy::{joules_per_inference, loihi_energy_bounds, EnergyModel, DEFAULT_EFFICIENCY_FACTOR, DEFAULT_PER_CORE_WATTS};
use neuromed::model::LrGroup;

use super::settings::parse_key_values;
use super::CliError;

fn usage(msg: String) -> CliError {
    CliError::Usage(msg)
}

pub fn list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>, CliError> {
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse().map_err(|_| usage(format!("bad {what} entry {s:?}"))))
        .collect()
}

fn range(text: &str) -> Result<std::ops::Range<usize>, CliError> {
    let (a, b) = text.split_once("..").ok_or_else(|| usage(format!("expected a range like 0..4, got {text:?}")))?;
    let parse = |s: &str| s.trim().parse::<usize>().map_err(|_| usage(format!("bad range bound in {text:?}")));
    let (a, b) = (parse(a)?, parse(b)?);
    if a >= b {
        return Err(usage(format!("empty range {text:?}")));
    }
    Ok(a..b)
}

/// `0..4`, `0,1,5` or a mix such as `0..3,7`.
pub fn index_set(text: &str) -> Result<BTreeSet<usize>, CliError> {
    let mut out = BTreeSet::new();
    for part in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        if part.contains("..") {
            out.extend(range(part)?);
        } else {
            out.insert(part.parse().map_err(|_| usage(format!("bad layer index {part:?}")))?);
        }
    }
    Ok(out)
}

/// `0..3:0.1,3..9:1.0`.
pub fn lr_groups(text: &str) -> Result<Vec<LrGroup>, CliError> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|part| {
            let (r, m) = part.split_once(':').ok_or_else(|| usage(format!("expected RANGE:MULTIPLIER, got {part:?}")))?;
            let multiplier: f32 = m.trim().parse().map_err(|_| usage(format!("bad multiplier in {part:?}")))?;
            if !(multiplier >= 0.0) {
                return Err(usage(format!("multiplier must be nonnegative in {part:?}")));
            }
            Ok(LrGroup { layers: range(r)?, multiplier })
        })
        .collect()
}

/// `name=path,name=path`.
pub fn named_paths(text: &str) -> Result<Vec<(String, PathBuf)>, CliError> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|part| {
            let (n, p) = part.split_once('=').ok_or_else(|| usage(format!("expected name=path, got {part:?}")))?;
            Ok((n.trim().to_string(), PathBuf::from(p.trim())))
        })
        .collect()
}

/// Energy of one named row: a single figure or a `(lower, upper)` pair.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyRow {
    pub name: String,
    pub joules: f64,
    pub upper: Option<f64>,
}

/// Reads `name.key = value` lines. A `gpu` row needs `power_watts` and
/// `inferences_per_second`. A `loihi` row needs `cores` and
/// `inferences_per_second` plus either `gpu_joules` or `gpu_reference` (the
/// name of a gpu row); `efficiency_factor` and `per_core_watts` default to
/// the fitted constants. Rows keep the order of first appearance.
pub fn energy_config(text: &str, origin: &str) -> Result<Vec<EnergyRow>, CliError> {
    let mut order: Vec<String> = Vec::new();
    let mut fields: std::collections::BTreeMap<(String, String), String> = Default::default();
    for (k, v) in parse_key_values(text, origin)? {
        let (name, key) = k.split_once('.').ok_or_else(|| usage(format!("{origin}: expected name.key, got {k:?}")))?;
        if !order.iter().any(|n| n == name) {
            order.push(name.to_string());
        }
        fields.insert((name.to_string(), key.to_string()), v);
    }
    let get = |name: &str, key: &str| -> Option<&String> { fields.get(&(name.to_string(), key.to_string())) };
    let num = |name: &str, key: &str, default: Option<f64>| -> Result<f64, CliError> {
        match get(name, key) {
            Some(v) => v.parse().map_err(|_| usage(format!("{origin}: {name}.{key}={v:?} is not a number"))),
            None => default.ok_or_else(|| usage(format!("{origin}: {name}.{key} is missing"))),
        }
    };
    let known = ["kind", "power_watts", "inferences_per_second", "cores", "gpu_joules", "gpu_reference", "efficiency_factor", "per_core_watts"];
    if let Some((n, k)) = fields.keys().find(|(_, k)| !known.contains(&k.as_str())) {
        return Err(usage(format!("{origin}: unknown energy key {n}.{k}")));
    }
    let mut rows: Vec<EnergyRow> = Vec::new();
    for name in &order {
        let kind = get(name, "kind").map(String::as_str).unwrap_or("gpu");
        let row = match kind {
            "gpu" => {
                let j = joules_per_inference(num(name, "power_watts", None)?, num(name, "inferences_per_second", None)?)?;
                EnergyRow { name: name.clone(), joules: j, upper: None }
            }
            "loihi" => {
                let gpu = match get(name, "gpu_reference") {
                    Some(r) => rows
                        .iter()
                        .find(|row| &row.name == r)
                        .map(|row| row.joules)
                        .ok_or_else(|| usage(format!("{origin}: {name}.gpu_reference names unknown row {r:?} (define it first)")))?,
                    None => num(name, "gpu_joules", None)?,
                };
                let cores = num(name, "cores", None)?;
                if cores.fract() != 0.0 || cores < 1.0 {
                    return Err(usage(format!("{origin}: {name}.cores must be a positive integer")));
                }
                let m = EnergyModel::new(
                    gpu,
                    num(name, "efficiency_factor", Some(DEFAULT_EFFICIENCY_FACTOR))?,
                    num(name, "per_core_watts", Some(DEFAULT_PER_CORE_WATTS))?,
                    cores as u32,
                    num(name, "inferences_per_second", None)?,
                )?;
                let (lo, hi) = loihi_energy_bounds(&m);
                EnergyRow { name: name.clone(), joules: lo, upper: Some(hi) }
            }
            other => return Err(usage(format!("{origin}: {name}.kind must be gpu or loihi, got {other:?}"))),
        };
        rows.push(row);
    }
    Ok(rows)
}
