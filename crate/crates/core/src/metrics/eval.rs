use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{Dataset, FrameId, InstanceId, PERSON};
use crate::index::SearchIndex;
use crate::Result;

use super::{average_precision, map_at_r};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassFilter {
    Person,
    NonPerson,
    Any,
}

impl ClassFilter {
    pub fn accepts(self, class_label: &str) -> bool {
        match self {
            ClassFilter::Person => class_label == PERSON,
            ClassFilter::NonPerson => class_label != PERSON,
            ClassFilter::Any => true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relevance {
    SameIdentity,
    SameInstance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalProtocol {
    pub name: String,
    pub query_filter: ClassFilter,
    pub reference_filter: ClassFilter,
    #[serde(default)]
    pub same_frame_excluded: bool,
    pub relevance: Relevance,
}

impl EvalProtocol {
    /// Person queries against person references, relevant when the
    /// identity matches.
    pub fn person() -> Self {
        Self {
            name: "person".into(),
            query_filter: ClassFilter::Person,
            reference_filter: ClassFilter::Person,
            same_frame_excluded: false,
            relevance: Relevance::SameIdentity,
        }
    }

    /// Object queries against object references, relevant when the
    /// instance id matches.
    pub fn non_person() -> Self {
        Self {
            name: "non_person".into(),
            query_filter: ClassFilter::NonPerson,
            reference_filter: ClassFilter::NonPerson,
            same_frame_excluded: false,
            relevance: Relevance::SameInstance,
        }
    }
}

/// Ranking of the searchable references for one query, as index positions.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryRanking {
    pub instance_id: InstanceId,
    pub frame_id: FrameId,
    pub group: u32,
    /// The query's own index entry, if it has one.
    pub own_entry: Option<usize>,
    pub ranked: Vec<usize>,
    /// Eligible entries withheld from this query: itself and, if the
    /// protocol says so, everything in its frame.
    pub withheld: Vec<usize>,
}

/// Rankings for a whole protocol plus the relevance group of every index
/// entry. Entries failing the reference filter are not eligible.
#[derive(Clone, Debug, PartialEq)]
pub struct RankingTable {
    pub eligible: Vec<bool>,
    pub searchable: Vec<bool>,
    pub groups: Vec<u32>,
    pub queries: Vec<QueryRanking>,
    /// Queries dropped because they carry no relevance key.
    pub unkeyed: usize,
    pub digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QueryScore {
    pub query_instance_id: InstanceId,
    pub query_frame_id: FrameId,
    /// Relevant references in the index, excluded ones included.
    pub n_relevant: usize,
    /// Relevant references a search can actually return.
    pub n_retrievable: usize,
    pub ap: Option<f64>,
    pub ap_at_r: Option<f64>,
    pub rank1: bool,
    pub rank5: bool,
}

fn hash_floats(h: &mut Sha256, v: &[f64]) {
    for x in v {
        h.update(x.to_bits().to_le_bytes());
    }
}

/// Embeds every query passing the protocol's query filter and ranks the
/// searchable eligible references against it.
pub fn rank_queries<F>(
    index: &SearchIndex,
    mut embed_fn: F,
    ds: &Dataset,
    protocol: &EvalProtocol,
) -> Result<RankingTable>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let mut keys: BTreeMap<String, u32> = BTreeMap::new();
    let mut key_of = |instance_id: InstanceId, identity: Option<&String>| -> Option<u32> {
        let k = match protocol.relevance {
            Relevance::SameIdentity => identity?.clone(),
            Relevance::SameInstance => instance_id.to_string(),
        };
        let next = keys.len() as u32;
        Some(*keys.entry(k).or_insert(next))
    };

    let mut digest = Sha256::new();
    digest.update(serde_json::to_vec(protocol)?);
    let entries = index.entries();
    let mut eligible = Vec::with_capacity(entries.len());
    let mut groups = Vec::with_capacity(entries.len());
    let mut searchable = Vec::with_capacity(entries.len());
    let mut fresh = u32::MAX;
    for e in entries {
        searchable.push(!e.is_excluded());
        eligible.push(protocol.reference_filter.accepts(&e.class_label));
        groups.push(key_of(e.instance_id, e.identity_label.as_ref()).unwrap_or_else(|| {
            fresh -= 1;
            fresh
        }));
        digest.update(e.instance_id.to_le_bytes());
        digest.update(e.frame_id.to_le_bytes());
        digest.update(e.exclusion.as_str());
        hash_floats(&mut digest, &e.embedding);
    }

    let mut queries = Vec::new();
    let mut unkeyed = 0;
    for r in ds
        .records()
        .iter()
        .filter(|r| protocol.query_filter.accepts(&r.class_label))
    {
        let Some(group) = key_of(r.instance_id, r.identity_label.as_ref()) else {
            unkeyed += 1;
            continue;
        };
        let q = embed_fn(&r.features)?;
        hash_floats(&mut digest, &q);
        let own_entry = index.position(r.key());
        let held =
            |i: usize| Some(i) == own_entry || (protocol.same_frame_excluded && entries[i].frame_id == r.frame_id);
        let ranked = index
            .rank_all(&q)
            .into_iter()
            .map(|(i, _)| i)
            .filter(|&i| eligible[i] && !held(i))
            .collect();
        let withheld = (0..entries.len()).filter(|&i| eligible[i] && held(i)).collect();
        queries.push(QueryRanking {
            instance_id: r.instance_id,
            frame_id: r.frame_id,
            group,
            own_entry,
            ranked,
            withheld,
        });
    }
    Ok(RankingTable {
        eligible,
        searchable,
        groups,
        queries,
        unkeyed,
        digest: hex::encode(digest.finalize()),
    })
}

/// Scores every query of `table` under the given entry groups. A query with
/// an own entry takes that entry's group, so relabeling the entries
/// relabels the queries consistently.
pub fn score_rankings(table: &RankingTable, groups: &[u32]) -> Vec<QueryScore> {
    let mut totals: BTreeMap<u32, usize> = BTreeMap::new();
    for (i, &g) in groups.iter().enumerate() {
        if table.eligible[i] {
            *totals.entry(g).or_default() += 1;
        }
    }
    table
        .queries
        .iter()
        .map(|q| {
            let group = q
                .own_entry
                .filter(|&i| table.eligible[i])
                .map_or(q.group, |i| groups[i]);
            let held_same = q.withheld.iter().filter(|&&i| groups[i] == group).count();
            let n_relevant = totals.get(&group).copied().unwrap_or(0) - held_same;
            let flags: Vec<bool> = q.ranked.iter().map(|&i| groups[i] == group).collect();
            QueryScore {
                query_instance_id: q.instance_id,
                query_frame_id: q.frame_id,
                n_relevant,
                n_retrievable: flags.iter().filter(|&&f| f).count(),
                ap: average_precision(&flags, n_relevant),
                ap_at_r: map_at_r(&flags, n_relevant),
                rank1: flags.first().copied().unwrap_or(false),
                rank5: flags.iter().take(5).any(|&f| f),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub protocol: String,
    /// Queries that entered the mean.
    pub n_queries: usize,
    /// Queries with no relevant reference, or no relevance key.
    pub n_skipped: usize,
    pub n_references: usize,
    pub map: f64,
    pub map_at_r: f64,
    pub rank1: f64,
    pub rank5: f64,
    /// Share of relevant references that are searchable, over all queries.
    pub coverage: f64,
    /// Set when nothing relevant can be retrieved; metrics are 0 then.
    pub zero_coverage: bool,
    pub config_digest: String,
    #[serde(skip)]
    pub per_query: Vec<QueryScore>,
}

impl EvalReport {
    pub fn from_scores(protocol: &EvalProtocol, table: &RankingTable, per_query: Vec<QueryScore>) -> Self {
        let n_references = table
            .eligible
            .iter()
            .zip(&table.searchable)
            .filter(|(e, s)| **e && **s)
            .count();
        let scored: Vec<&QueryScore> = per_query.iter().filter(|q| q.ap.is_some()).collect();
        let relevant: usize = scored.iter().map(|q| q.n_relevant).sum();
        let retrievable: usize = scored.iter().map(|q| q.n_retrievable).sum();
        let zero_coverage = retrievable == 0;
        let mean = |f: &dyn Fn(&QueryScore) -> f64| {
            if zero_coverage || scored.is_empty() {
                0.0
            } else {
                scored.iter().map(|q| f(q)).sum::<f64>() / scored.len() as f64
            }
        };
        Self {
            protocol: protocol.name.clone(),
            n_queries: scored.len(),
            n_skipped: per_query.len() - scored.len() + table.unkeyed,
            n_references,
            map: mean(&|q| q.ap.unwrap_or(0.0)),
            map_at_r: mean(&|q| q.ap_at_r.unwrap_or(0.0)),
            rank1: mean(&|q| q.rank1 as u8 as f64),
            rank5: mean(&|q| q.rank5 as u8 as f64),
            coverage: if relevant == 0 {
                0.0
            } else {
                retrievable as f64 / relevant as f64
            },
            zero_coverage,
            config_digest: table.digest.clone(),
            per_query,
        }
    }

    /// Per-query table; the summary numbers are its column means over rows
    /// with a non-empty `ap`.
    pub fn write_per_query_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "query_instance_id",
            "query_frame_id",
            "n_relevant",
            "n_retrievable",
            "ap",
            "ap_at_r",
            "rank1",
            "rank5",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for q in &self.per_query {
            out.write_record([
                q.query_instance_id.to_string(),
                q.query_frame_id.to_string(),
                q.n_relevant.to_string(),
                q.n_retrievable.to_string(),
                opt(q.ap),
                opt(q.ap_at_r),
                (q.rank1 as u8).to_string(),
                (q.rank5 as u8).to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_summary_json<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }
}

/// Runs a protocol end to end: embed queries, rank, score, aggregate.
pub fn evaluate<F>(index: &SearchIndex, embed_fn: F, ds: &Dataset, protocol: &EvalProtocol) -> Result<EvalReport>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let table = rank_queries(index, embed_fn, ds, protocol)?;
    let scores = score_rankings(&table, &table.groups);
    Ok(EvalReport::from_scores(protocol, &table, scores))
}
