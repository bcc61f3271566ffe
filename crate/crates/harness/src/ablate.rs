use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use evlight_core::fusion::count_params_flops;
use evlight_core::objectives::MetricSummary;
use evlight_core::synth::Split;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::infer::evaluate;
use crate::train::train;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flag {
    NoEvents,
    NoIrfs,
    NoErfs,
    NoSelection,
    NoGru,
    NoTemporalLoss,
    OnesMask,
}

impl Flag {
    pub const ALL: [Flag; 7] = [
        Flag::NoEvents,
        Flag::NoIrfs,
        Flag::NoErfs,
        Flag::NoSelection,
        Flag::NoGru,
        Flag::NoTemporalLoss,
        Flag::OnesMask,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Flag::NoEvents => "no_events",
            Flag::NoIrfs => "no_irfs",
            Flag::NoErfs => "no_erfs",
            Flag::NoSelection => "no_selection",
            Flag::NoGru => "no_gru",
            Flag::NoTemporalLoss => "no_temporal_loss",
            Flag::OnesMask => "ones_mask",
        }
    }

    pub fn apply(self, cfg: &mut TrainConfig) {
        let m = &mut cfg.model;
        match self {
            Flag::NoEvents => m.use_events = false,
            Flag::NoIrfs => m.use_irfs = false,
            Flag::NoErfs => m.use_erfs = false,
            Flag::NoSelection => {
                m.use_irfs = false;
                m.use_erfs = false;
            }
            Flag::NoGru => m.use_gru = false,
            Flag::NoTemporalLoss => cfg.loss.lambda_temp = 0.0,
            Flag::OnesMask => m.ones_mask = true,
        }
    }
}

impl FromStr for Flag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Flag::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| {
                let known: Vec<_> = Flag::ALL.iter().map(|f| f.name()).collect();
                Error::Config(format!(
                    "unknown ablation flag `{s}`; expected one of {}",
                    known.join(", ")
                ))
            })
    }
}

/// A named set of flags; `no_irfs+no_gru` combines two.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub flags: Vec<Flag>,
}

impl Variant {
    pub fn base() -> Self {
        Self {
            name: "base".into(),
            flags: Vec::new(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        let flags = s
            .split('+')
            .map(|f| f.trim().parse())
            .collect::<Result<Vec<Flag>>>()?;
        Ok(Self {
            name: s.to_string(),
            flags,
        })
    }

    /// The variant's config, checkpointing into `<base dir>/<name>`.
    pub fn config(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        for f in &self.flags {
            f.apply(&mut cfg);
        }
        cfg.checkpoint_dir = base.checkpoint_dir.join(&self.name);
        cfg.resume = None;
        cfg
    }
}

/// Parses a comma-separated list, rejecting unknown flags and duplicates.
pub fn parse_variants(list: &str) -> Result<Vec<Variant>> {
    let mut out: Vec<Variant> = Vec::new();
    for part in list.split(',').filter(|p| !p.trim().is_empty()) {
        let v = Variant::parse(part)?;
        if v.name == "base" || out.iter().any(|o| o.name == v.name) {
            return Err(Error::Config(format!("duplicate variant `{}`", v.name)));
        }
        out.push(v);
    }
    if out.is_empty() {
        return Err(Error::Config("no ablation variants given".into()));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub flags: Vec<Flag>,
    pub params: u64,
    pub summary: MetricSummary,
    pub flicker: f64,
    pub checkpoint: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub split: Split,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| variant | params | PSNR | PSNR* | SSIM | flicker |\n|---|---:|---:|---:|---:|---:|\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "| {} | {} | {:.2} | {:.2} | {:.4} | {:.5} |",
                r.variant, r.params, r.summary.psnr, r.summary.psnr_star, r.summary.ssim, r.flicker
            );
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let md = dir.join("ablation.md");
        fs::write(&md, self.to_markdown()).map_err(|e| Error::io(&md, e))?;
        let js = dir.join("ablation.json");
        fs::write(&js, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&js, e))
    }
}

/// Trains the base config and every variant with the same seed, then
/// evaluates the final checkpoint of each on `split`.
pub fn ablate(base: &TrainConfig, variants: &[Variant], split: Split) -> Result<AblationTable> {
    let all: Vec<Variant> = std::iter::once(Variant::base())
        .chain(variants.iter().cloned())
        .collect();
    let mut rows = Vec::with_capacity(all.len());
    for v in &all {
        let cfg = v.config(base);
        let report = train(&cfg)?;
        let ckpt =
            report.checkpoints.last().cloned().ok_or_else(|| {
                Error::Config(format!("variant `{}` produced no checkpoint", v.name))
            })?;
        let eval = evaluate(
            &ckpt,
            &cfg.manifest,
            split,
            Some(&cfg.checkpoint_dir.join("eval")),
        )?;
        rows.push(AblationRow {
            variant: v.name.clone(),
            flags: v.flags.clone(),
            params: count_params_flops(&cfg.model)?.0,
            summary: eval.summary,
            flicker: eval.flicker,
            checkpoint: ckpt,
        });
    }
    let table = AblationTable { split, rows };
    table.write(&base.checkpoint_dir)?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_known_flags_and_combinations() {
        let v = parse_variants("no_irfs, no_selection+no_gru ,ones_mask").unwrap();
        assert_eq!(v.len(), 3);
        assert_eq!(v[1].flags, vec![Flag::NoSelection, Flag::NoGru]);
        for f in Flag::ALL {
            assert_eq!(f.name().parse::<Flag>().unwrap(), f);
        }
    }

    #[test]
    fn rejects_unknown_and_duplicate() {
        let e = parse_variants("no_irfs,no_magic").unwrap_err();
        assert!(e.to_string().contains("no_magic"));
        assert!(parse_variants("no_gru,no_gru").is_err());
        assert!(parse_variants("base").is_err());
        assert!(parse_variants(" , ").is_err());
    }

    #[test]
    fn no_selection_implies_both_branches_off() {
        let base = TrainConfig::default();
        let sel = Variant::parse("no_selection").unwrap().config(&base);
        let both = Variant::parse("no_irfs+no_erfs").unwrap().config(&base);
        assert!(!sel.model.use_irfs && !sel.model.use_erfs);
        assert_eq!(sel.model, both.model);
    }

    #[test]
    fn flags_touch_the_right_fields() {
        let base = TrainConfig::default();
        let cfg = |s: &str| Variant::parse(s).unwrap().config(&base);
        assert!(!cfg("no_events").model.use_events);
        assert!(!cfg("no_gru").model.use_gru);
        assert_eq!(cfg("no_temporal_loss").loss.lambda_temp, 0.0);
        assert!(cfg("ones_mask").model.ones_mask);
        assert_eq!(
            cfg("no_gru").checkpoint_dir,
            base.checkpoint_dir.join("no_gru")
        );
    }
}
