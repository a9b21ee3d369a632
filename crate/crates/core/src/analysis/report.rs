use crate::error::{Error, Result};
use crate::model::{count_parameters, ModelConfig, ParameterReport, VariantKind};

/// Parameter breakdowns of several configs, side by side.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTable {
    pub columns: Vec<(VariantKind, ParameterReport)>,
}

impl ParamTable {
    /// CSV with one row per component and one column per config.
    pub fn render(&self) -> String {
        let mut s = String::from("component");
        for (k, _) in &self.columns {
            s.push_str(&format!(",{}", k.name()));
        }
        s.push('\n');
        let names: Vec<&str> = self.columns.first().map_or(Vec::new(), |(_, r)| r.rows().iter().map(|(n, _)| *n).collect());
        for (i, name) in names.iter().enumerate() {
            s.push_str(name);
            for (_, r) in &self.columns {
                s.push_str(&format!(",{}", r.rows()[i].1));
            }
            s.push('\n');
        }
        s
    }

    fn total(&self, kind: VariantKind) -> Option<usize> {
        self.columns.iter().find(|(k, _)| *k == kind).map(|(_, r)| r.total)
    }

    /// share == MA, DA > MA and DA-reduce < DA, for the variants present.
    pub fn check_relations(&self) -> Result<()> {
        let (ma, da, red, share) = (
            self.total(VariantKind::Ma),
            self.total(VariantKind::Da),
            self.total(VariantKind::DaReduce),
            self.total(VariantKind::DaShare),
        );
        let fail = |what: &str| Err(Error::Oracle(format!("parameter relation violated: {what}")));
        if let (Some(s), Some(m)) = (share, ma) {
            if s != m {
                return fail(&format!("da-share {s} != ma {m}"));
            }
        }
        if let (Some(d), Some(m)) = (da, ma) {
            if d <= m {
                return fail(&format!("da {d} <= ma {m}"));
            }
        }
        if let (Some(r), Some(d)) = (red, da) {
            if r >= d {
                return fail(&format!("da-reduce {r} >= da {d}"));
            }
        }
        Ok(())
    }
}

/// Counts every config and checks the relations between variants.
pub fn param_report(cfgs: &[ModelConfig]) -> Result<ParamTable> {
    let table = ParamTable {
        columns: cfgs.iter().map(|c| (c.variant.kind, count_parameters(c))).collect(),
    };
    table.check_relations()?;
    Ok(table)
}

/// The four variants built by `make`.
pub fn all_variants(make: impl Fn(VariantKind) -> ModelConfig) -> Vec<ModelConfig> {
    [VariantKind::Ma, VariantKind::Da, VariantKind::DaReduce, VariantKind::DaShare]
        .into_iter()
        .map(make)
        .collect()
}
