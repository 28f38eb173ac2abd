//! Which global-attention layers to skip for a layer-drop ablation.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use crate::error::{Error, Result};

/// Global-attention layers in VGGT.
pub const VGGT_GLOBAL_LAYERS: usize = 24;
/// Global-attention layers in π³.
pub const PI3_GLOBAL_LAYERS: usize = 18;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DropMode {
    Front,
    Back,
    FrontAndBack,
    Mid,
}

impl DropMode {
    pub const ALL: [DropMode; 4] = [
        DropMode::Front,
        DropMode::Back,
        DropMode::FrontAndBack,
        DropMode::Mid,
    ];
}

impl fmt::Display for DropMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DropMode::Front => "front",
            DropMode::Back => "back",
            DropMode::FrontAndBack => "front-and-back",
            DropMode::Mid => "mid",
        })
    }
}

impl FromStr for DropMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(char::is_ascii_alphanumeric)
            .collect::<String>()
            .to_ascii_lowercase();
        match key.as_str() {
            "front" => Ok(DropMode::Front),
            "back" => Ok(DropMode::Back),
            "frontandback" | "frontback" | "alternating" => Ok(DropMode::FrontAndBack),
            "mid" | "middle" => Ok(DropMode::Mid),
            _ => Err(Error::InvalidArgument(format!("unknown drop mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DropPolicy {
    mode: DropMode,
    n_skipped: usize,
    layers: usize,
}

impl DropPolicy {
    pub fn new(mode: DropMode, n_skipped: usize, layers: usize) -> Result<Self> {
        if n_skipped > layers {
            return Err(Error::InvalidArgument(format!(
                "cannot skip {n_skipped} of {layers} layers"
            )));
        }
        Ok(Self {
            mode,
            n_skipped,
            layers,
        })
    }

    pub fn mode(&self) -> DropMode {
        self.mode
    }

    pub fn n_skipped(&self) -> usize {
        self.n_skipped
    }

    pub fn layers(&self) -> usize {
        self.layers
    }
}

/// Skipped layer indices in the order the policy picks them.
///
/// `FrontAndBack` alternates front-first: 0, L−1, 1, L−2, … `Mid` is the
/// contiguous block starting at `floor((L − n) / 2)`.
pub fn drop_schedule(policy: &DropPolicy) -> Vec<usize> {
    let (n, l) = (policy.n_skipped, policy.layers);
    match policy.mode {
        DropMode::Front => (0..n).collect(),
        DropMode::Back => (l - n..l).collect(),
        DropMode::FrontAndBack => (0..n)
            .map(|i| if i % 2 == 0 { i / 2 } else { l - 1 - i / 2 })
            .collect(),
        DropMode::Mid => {
            let start = (l - n) / 2;
            (start..start + n).collect()
        }
    }
}

fn join_layers(layers: &[usize]) -> String {
    layers
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(";")
}

/// Every (mode, n) schedule for `layers` layers as CSV:
/// `mode,n_skipped,skipped_layers` with layers separated by `;`.
pub fn write_schedule_table<W: Write>(layers: usize, w: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(["mode", "n_skipped", "skipped_layers"])?;
    for mode in DropMode::ALL {
        for n in 0..=layers {
            let s = drop_schedule(&DropPolicy::new(mode, n, layers)?);
            w.write_record([mode.to_string(), n.to_string(), join_layers(&s)])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Joins a metrics CSV that has `mode` and `n_skipped` columns (plus any
/// metric columns) with the schedule, appending a `skipped_layers` column.
pub fn join_metrics<R: Read, W: Write>(layers: usize, metrics: R, out: W) -> Result<()> {
    let mut r = csv::Reader::from_reader(metrics);
    let headers = r.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim().eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::InvalidArgument(format!("metrics CSV lacks a {name:?} column")))
    };
    let (mode_col, n_col) = (col("mode")?, col("n_skipped")?);
    let mut cache: HashMap<(DropMode, usize), String> = HashMap::new();
    let mut w = csv::Writer::from_writer(out);
    let mut head: Vec<String> = headers.iter().map(str::to_owned).collect();
    head.push("skipped_layers".into());
    w.write_record(&head)?;
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or("").trim();
        let mode: DropMode = field(mode_col).parse()?;
        let n: usize = field(n_col).parse().map_err(|_| {
            Error::InvalidArgument(format!(
                "row {}: bad n_skipped {:?}",
                line + 1,
                field(n_col)
            ))
        })?;
        let layers_str = match cache.get(&(mode, n)) {
            Some(s) => s.clone(),
            None => {
                let s = join_layers(&drop_schedule(&DropPolicy::new(mode, n, layers)?));
                cache.insert((mode, n), s.clone());
                s
            }
        };
        let mut row: Vec<&str> = rec.iter().collect();
        row.push(&layers_str);
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
