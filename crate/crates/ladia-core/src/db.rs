//! Flat entity database queried through pseudo-turns.
//!
//! A database is a fixed schema plus rows of string values. Queries come
//! in a positional form (`query italian moderate` — constraint values in
//! a fixed slot order) and a named form (`query food italian`). Results
//! are rendered as a `db_result` turn: the first matching row's values
//! comma-joined in schema order, or the literal `no_match`.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{Role, Turn, QUERY_MARKER};
use crate::error::{Error, Result};

/// Token used for an empty result.
pub const NO_MATCH: &str = "no_match";

/// One database row as (slot, value) pairs in schema order.
pub type Entity = Vec<(String, String)>;

/// Constraints extracted from a query turn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Query {
    /// Values matched against slots in the caller's slot order; fewer
    /// values than slots constrain a prefix of that order.
    Positional(Vec<String>),
    /// Explicit (slot, value) constraints.
    Named(Vec<(String, String)>),
}

/// How result turns are rendered.
#[derive(Clone, Copy, Debug, Default)]
pub struct ResultFormat {
    /// Append the number of matching rows after the entity values.
    pub append_count: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Database {
    schema: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Database {
    pub fn new(schema: Vec<String>, rows: Vec<Vec<String>>) -> Result<Self> {
        if schema.is_empty() {
            return Err(Error::Config("database schema is empty".into()));
        }
        let mut seen = schema.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != schema.len() {
            return Err(Error::Config("database schema has duplicate slots".into()));
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != schema.len() {
                return Err(Error::Config(format!(
                    "database row {i} has {} values, schema has {} slots",
                    row.len(),
                    schema.len()
                )));
            }
        }
        Ok(Self { schema, rows })
    }

    pub fn schema(&self) -> &[String] {
        &self.schema
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn slot_index(&self, slot: &str) -> Option<usize> {
        self.schema.iter().position(|s| s == slot)
    }

    /// Row `i` as (slot, value) pairs.
    pub fn entity(&self, i: usize) -> Option<Entity> {
        self.rows.get(i).map(|row| {
            self.schema
                .iter()
                .cloned()
                .zip(row.iter().cloned())
                .collect()
        })
    }

    /// All values a slot takes, sorted and deduplicated.
    pub fn distinct_values(&self, slot: &str) -> Vec<String> {
        let Some(col) = self.slot_index(slot) else {
            return Vec::new();
        };
        let mut vals: Vec<String> = self.rows.iter().map(|r| r[col].clone()).collect();
        vals.sort_unstable();
        vals.dedup();
        vals
    }

    /// Every value in the database keyed by the slot it belongs to, for
    /// spotting database mentions in generated text.
    pub fn lexicon(&self) -> BTreeMap<String, Vec<String>> {
        self.schema
            .iter()
            .map(|s| (s.clone(), self.distinct_values(s)))
            .collect()
    }

    fn constraints(&self, query: &Query) -> Vec<(usize, String)> {
        match query {
            Query::Positional(values) => values
                .iter()
                .enumerate()
                .filter(|(i, _)| *i < self.schema.len())
                .map(|(i, v)| (i, v.clone()))
                .collect(),
            Query::Named(pairs) => pairs
                .iter()
                .filter_map(|(s, v)| self.slot_index(s).map(|i| (i, v.clone())))
                .collect(),
        }
    }

    /// Run a query: returns the first matching row index (rows keep their
    /// construction order) and the total number of matches. Unknown slots
    /// and positional values beyond the schema are ignored.
    pub fn execute(&self, query: &Query) -> (Option<usize>, usize) {
        let constraints = self.constraints(query);
        let mut first = None;
        let mut count = 0;
        for (i, row) in self.rows.iter().enumerate() {
            if constraints.iter().all(|(col, v)| &row[*col] == v) {
                if first.is_none() {
                    first = Some(i);
                }
                count += 1;
            }
        }
        (first, count)
    }

    /// Positional queries read constraint values against this slot order
    /// (the schema itself). Callers with a different order should map to
    /// [`Query::Named`] instead.
    pub fn positional_order(&self) -> &[String] {
        &self.schema
    }

    /// Render an executed query as a `db_result` turn.
    pub fn format_result(
        &self,
        row: Option<usize>,
        count: usize,
        format: &ResultFormat,
    ) -> Turn {
        let mut tokens: Vec<String> = match row.and_then(|i| self.rows.get(i)) {
            Some(values) => {
                let mut toks = Vec::new();
                for (i, v) in values.iter().enumerate() {
                    if i > 0 {
                        toks.push(",".to_string());
                    }
                    toks.extend(v.split(' ').map(String::from));
                }
                toks
            }
            None => vec![NO_MATCH.to_string()],
        };
        if format.append_count {
            tokens.push(",".to_string());
            tokens.push(count.to_string());
        }
        Turn::new(Role::DbResult, tokens)
    }

    /// Parse a query turn's tokens back into a [`Query`]. The leading
    /// marker token is required. With `named_form` the remainder is read
    /// as alternating slot/value tokens; otherwise values are paired with
    /// `slot_order` (one token per slot), falling back to schema order
    /// when `slot_order` is empty. Surplus tokens from a malformed
    /// generated query are dropped rather than rejected.
    pub fn parse_query_tokens(
        &self,
        tokens: &[String],
        slot_order: &[String],
        named_form: bool,
    ) -> Result<Query> {
        if tokens.first().map(String::as_str) != Some(QUERY_MARKER) {
            return Err(Error::Invalid(format!(
                "query turn must start with '{QUERY_MARKER}', got {tokens:?}"
            )));
        }
        let rest = &tokens[1..];
        if named_form {
            Ok(Query::Named(
                rest.chunks(2)
                    .filter(|c| c.len() == 2)
                    .map(|c| (c[0].clone(), c[1].clone()))
                    .collect(),
            ))
        } else if slot_order.is_empty() {
            Ok(Query::Positional(rest.to_vec()))
        } else {
            Ok(Query::Named(
                slot_order
                    .iter()
                    .zip(rest.iter())
                    .map(|(s, v)| (s.clone(), v.clone()))
                    .collect(),
            ))
        }
    }
}
