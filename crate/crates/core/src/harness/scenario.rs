//! Scenario files: flat `key = value` text driving a whole cluster run.
//!
//! One file describes the cluster shape, the workload, and a fault script
//! whose entries fire after a given number of submitted transactions.
//! Repeating the `fault` key builds the script in order. Unknown keys are
//! errors so a typo cannot silently run a different experiment.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::crypto::Scheme;
use crate::merkle::ForestConfig;
use crate::ReplicaId;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("line {0}: expected `key = value`")]
    BadLine(usize),
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("bad value for {key}: {why}")]
    BadValue { key: String, why: String },
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

/// Share of each operation in the workload, in percent. Must sum to 100.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OpMix {
    pub read: u32,
    pub update: u32,
    pub rmw: u32,
    pub scan: u32,
    pub insert: u32,
    pub delete: u32,
}

impl Default for OpMix {
    fn default() -> Self {
        OpMix { read: 50, update: 25, rmw: 15, scan: 10, insert: 0, delete: 0 }
    }
}

impl OpMix {
    pub fn total(&self) -> u32 {
        self.read + self.update + self.rmw + self.scan + self.insert + self.delete
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyDistribution {
    Uniform,
    Zipfian,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FaultAction {
    InjectCorrupt {
        replica: ReplicaId,
        table: String,
        rows: u64,
        leaves: u64,
        /// Stealth mode: rows change but the forest is left stale.
        stealth: bool,
    },
    InjectNondet,
    CompareStates,
    /// Repair everything the most recent detection round flagged.
    Recover,
    SaveSyncState,
    RebuildForest {
        replica: ReplicaId,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimedFault {
    /// Fires after this many workload transactions have been submitted.
    pub offset: u64,
    pub action: FaultAction,
}

#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub replicas: u32,
    pub workers: usize,
    /// Read/write-set generations retained per executor (capacity hint).
    pub retained: Option<usize>,
    pub scheme: Scheme,
    /// Vote on roots as well as result hashes (`roots`), or results only
    /// (`results`, the weaker ablation).
    pub vote_on_roots: bool,
    pub table: String,
    pub forest: ForestConfig,
    /// Maintain forests at all; `false` is the no-integrity ablation.
    pub merkle: bool,
    pub rows: u64,
    pub transactions: u64,
    pub clients: u32,
    pub distribution: KeyDistribution,
    pub zipf_exponent: f64,
    pub mix: OpMix,
    pub scan_len: u32,
    pub seed: u64,
    pub faults: Vec<TimedFault>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            replicas: 4,
            workers: 2,
            retained: None,
            scheme: Scheme::Ed25519,
            vote_on_roots: true,
            table: "kv".into(),
            forest: ForestConfig { partitions: 16, fanout: 4, levels: 2 },
            merkle: true,
            rows: 1000,
            transactions: 2000,
            clients: 4,
            distribution: KeyDistribution::Zipfian,
            zipf_exponent: 0.99,
            mix: OpMix::default(),
            scan_len: 10,
            seed: 42,
            faults: Vec::new(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ScenarioError> {
    value.parse().map_err(|_| ScenarioError::BadValue {
        key: key.to_string(),
        why: format!("{value:?} is not a number"),
    })
}

impl ScenarioConfig {
    pub fn parse(text: &str) -> Result<ScenarioConfig, ScenarioError> {
        let mut cfg = ScenarioConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ScenarioError::BadLine(lineno + 1));
            };
            let (key, value) = (key.trim(), value.trim());
            cfg.apply(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<(), ScenarioError> {
        match key {
            "replicas" => self.replicas = parse_num(key, value)?,
            "workers" => self.workers = parse_num(key, value)?,
            "retained" => self.retained = Some(parse_num(key, value)?),
            "signatures" => {
                self.scheme = match value {
                    "real" => Scheme::Ed25519,
                    other => Scheme::parse(other).map_err(|e| ScenarioError::BadValue {
                        key: key.into(),
                        why: e.to_string(),
                    })?,
                }
            }
            "vote_mode" => {
                self.vote_on_roots = match value {
                    "roots" => true,
                    "results" => false,
                    other => {
                        return Err(ScenarioError::BadValue {
                            key: key.into(),
                            why: format!("{other:?}, want roots or results"),
                        })
                    }
                }
            }
            "table" => self.table = value.to_string(),
            "partitions" => self.forest.partitions = parse_num(key, value)?,
            "fanout" => self.forest.fanout = parse_num(key, value)?,
            "levels" => self.forest.levels = parse_num(key, value)?,
            "merkle" => {
                self.merkle = match value {
                    "on" => true,
                    "off" => false,
                    other => {
                        return Err(ScenarioError::BadValue {
                            key: key.into(),
                            why: format!("{other:?}, want on or off"),
                        })
                    }
                }
            }
            "rows" => self.rows = parse_num(key, value)?,
            "transactions" => self.transactions = parse_num(key, value)?,
            "clients" => self.clients = parse_num(key, value)?,
            "distribution" => {
                self.distribution = match value {
                    "uniform" => KeyDistribution::Uniform,
                    "zipfian" => KeyDistribution::Zipfian,
                    other => {
                        return Err(ScenarioError::BadValue {
                            key: key.into(),
                            why: format!("{other:?}, want uniform or zipfian"),
                        })
                    }
                }
            }
            "zipf_exponent" => self.zipf_exponent = parse_num(key, value)?,
            "read_pct" => self.mix.read = parse_num(key, value)?,
            "update_pct" => self.mix.update = parse_num(key, value)?,
            "rmw_pct" => self.mix.rmw = parse_num(key, value)?,
            "scan_pct" => self.mix.scan = parse_num(key, value)?,
            "insert_pct" => self.mix.insert = parse_num(key, value)?,
            "delete_pct" => self.mix.delete = parse_num(key, value)?,
            "scan_len" => self.scan_len = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "fault" => {
                let fault = parse_fault(value)?;
                self.faults.push(fault);
            }
            other => return Err(ScenarioError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.replicas < 1 {
            return Err(ScenarioError::Invalid("need at least one replica".into()));
        }
        let needs_majority = self.faults.iter().any(|f| {
            !matches!(f.action, FaultAction::InjectNondet | FaultAction::RebuildForest { .. })
        });
        if needs_majority && self.replicas < 3 {
            return Err(ScenarioError::Invalid(
                "detection and recovery scenarios need at least 3 replicas".into(),
            ));
        }
        if self.workers < 1 {
            return Err(ScenarioError::Invalid("need at least one worker".into()));
        }
        if self.mix.total() != 100 {
            return Err(ScenarioError::Invalid(format!(
                "operation mix sums to {}, not 100",
                self.mix.total()
            )));
        }
        if self.rows == 0 {
            return Err(ScenarioError::Invalid("rows must be positive".into()));
        }
        if self.clients == 0 {
            return Err(ScenarioError::Invalid("need at least one client".into()));
        }
        self.forest
            .validate()
            .map_err(|e| ScenarioError::Invalid(format!("forest: {e}")))?;
        for f in &self.faults {
            if f.offset > self.transactions {
                return Err(ScenarioError::Invalid(format!(
                    "fault offset {} past the last transaction {}",
                    f.offset, self.transactions
                )));
            }
            let target = match &f.action {
                FaultAction::InjectCorrupt { replica, leaves, .. } => Some((*replica, *leaves)),
                FaultAction::RebuildForest { replica } => Some((*replica, 0)),
                _ => None,
            };
            if let Some((replica, leaves)) = target {
                if replica >= self.replicas {
                    return Err(ScenarioError::Invalid(format!(
                        "fault targets replica {replica}, cluster has {}",
                        self.replicas
                    )));
                }
                if leaves > self.forest.total_leaves() {
                    return Err(ScenarioError::Invalid(format!(
                        "fault spans {leaves} leaves, forest has {}",
                        self.forest.total_leaves()
                    )));
                }
            }
        }
        Ok(())
    }
}

fn parse_fault(value: &str) -> Result<TimedFault, ScenarioError> {
    let bad = |why: &str| ScenarioError::BadValue { key: "fault".into(), why: why.to_string() };
    let mut parts = value.split_whitespace();
    let offset: u64 = parts
        .next()
        .ok_or_else(|| bad("empty fault line"))?
        .parse()
        .map_err(|_| bad("offset must be a number"))?;
    let action = parts.next().ok_or_else(|| bad("missing action"))?;
    let mut args: BTreeMap<&str, &str> = BTreeMap::new();
    for p in parts {
        let (k, v) = p.split_once('=').ok_or_else(|| bad("fault args are key=value"))?;
        args.insert(k, v);
    }
    let get = |k: &str| args.get(k).copied().ok_or_else(|| bad(&format!("missing {k}=")));
    let num = |k: &str| -> Result<u64, ScenarioError> {
        get(k)?.parse().map_err(|_| bad(&format!("{k} must be a number")))
    };

    let action = match action {
        "inject-corrupt" => FaultAction::InjectCorrupt {
            replica: num("replica")? as ReplicaId,
            table: get("table")?.to_string(),
            rows: num("rows")?,
            leaves: num("leaves")?,
            stealth: match args.get("mode").copied().unwrap_or("tm1") {
                "tm1" => false,
                "tm2" => true,
                other => return Err(bad(&format!("mode {other:?}, want tm1 or tm2"))),
            },
        },
        "inject-nondet" => FaultAction::InjectNondet,
        "compare-states" => FaultAction::CompareStates,
        "recover" => FaultAction::Recover,
        "save-sync-state" => FaultAction::SaveSyncState,
        "rebuild-forest" => FaultAction::RebuildForest { replica: num("replica")? as ReplicaId },
        other => return Err(bad(&format!("unknown action {other:?}"))),
    };
    Ok(TimedFault { offset, action })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_a_full_scenario() {
        let text = "
            # cluster
            replicas = 3
            workers = 4
            signatures = null
            vote_mode = results

            table = store
            partitions = 8
            fanout = 2
            levels = 3

            rows = 500           # seeded before the workload
            transactions = 1500
            clients = 2
            distribution = uniform
            read_pct = 70
            update_pct = 20
            rmw_pct = 5
            scan_pct = 5
            seed = 7

            fault = 400 inject-corrupt replica=1 table=store rows=30 leaves=4 mode=tm1
            fault = 800 compare-states
            fault = 801 recover
        ";
        let cfg = ScenarioConfig::parse(text).unwrap();
        assert_eq!(cfg.replicas, 3);
        assert_eq!(cfg.workers, 4);
        assert_eq!(cfg.scheme, Scheme::Null);
        assert!(!cfg.vote_on_roots);
        assert_eq!(cfg.table, "store");
        assert_eq!(cfg.forest, ForestConfig { partitions: 8, fanout: 2, levels: 3 });
        assert_eq!(cfg.rows, 500);
        assert_eq!(cfg.distribution, KeyDistribution::Uniform);
        assert_eq!(cfg.mix, OpMix { read: 70, update: 20, rmw: 5, scan: 5, insert: 0, delete: 0 });
        assert_eq!(cfg.faults.len(), 3);
        assert_eq!(
            cfg.faults[0],
            TimedFault {
                offset: 400,
                action: FaultAction::InjectCorrupt {
                    replica: 1,
                    table: "store".into(),
                    rows: 30,
                    leaves: 4,
                    stealth: false,
                },
            }
        );
        assert_eq!(cfg.faults[1].action, FaultAction::CompareStates);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_mixes() {
        assert!(matches!(
            ScenarioConfig::parse("replica = 3"),
            Err(ScenarioError::UnknownKey(_))
        ));
        assert!(matches!(
            ScenarioConfig::parse("read_pct = 99"),
            Err(ScenarioError::Invalid(_))
        ));
        assert!(matches!(
            ScenarioConfig::parse("replicas = oops"),
            Err(ScenarioError::BadValue { .. })
        ));
        assert!(matches!(ScenarioConfig::parse("x y z"), Err(ScenarioError::BadLine(1))));
    }

    #[test]
    fn fault_script_bounds_are_checked() {
        let base = "replicas = 3\ntransactions = 100\n";
        let late = format!("{base}fault = 200 compare-states");
        assert!(matches!(ScenarioConfig::parse(&late), Err(ScenarioError::Invalid(_))));

        let bad_target = format!("{base}fault = 10 inject-corrupt replica=9 table=kv rows=1 leaves=1");
        assert!(matches!(ScenarioConfig::parse(&bad_target), Err(ScenarioError::Invalid(_))));

        let detection_needs_three = "replicas = 2\nfault = 10 compare-states\ntransactions = 100";
        assert!(matches!(
            ScenarioConfig::parse(detection_needs_three),
            Err(ScenarioError::Invalid(_))
        ));
    }

    #[test]
    fn defaults_are_a_valid_scenario() {
        ScenarioConfig::default().validate().unwrap();
    }
}
