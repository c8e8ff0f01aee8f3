//! Seeded synthetic dataset with planted user-cluster/keyphrase-cluster
//! structure.
//!
//! Items are split into clusters, clusters into subgroups. Keyphrases come in
//! four tiers: cluster-wide genres, subgroup tags, item-specific attributes and
//! cross-cluster noise. Each user has a home cluster and a couple of preferred
//! subgroups inside it, with a few interactions outside both.
//!
//! Entity ids: items `0..items`, keyphrases `items..items + keyphrases`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{
    write_interactions, write_items, write_triples, EntityId, InteractionSet, KnowledgeGraph,
    Triple, UserId,
};

pub const TRIPLES_FILE: &str = "kg.txt";
pub const ITEMS_FILE: &str = "items.txt";
pub const INTERACTIONS_FILE: &str = "interactions.txt";
pub const LABELS_FILE: &str = "keyphrase_labels.txt";

const REL_GENRE: usize = 0;
const REL_TAG: usize = 1;
const REL_ATTRIBUTE: usize = 2;
const REL_MISC: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub users: usize,
    pub items: usize,
    pub clusters: usize,
    pub subgroups_per_cluster: usize,
    /// Genre keyphrases per cluster, each on a `genre_coverage` share of it.
    pub genres_per_cluster: usize,
    pub genre_coverage: f64,
    /// Tags per subgroup, each on `tag_items` items of it.
    pub tags_per_subgroup: usize,
    pub tag_items: usize,
    /// Attribute keyphrases per item, each shared with one same-cluster item.
    pub attributes_per_item: usize,
    /// Noise keyphrases, each on `noise_items` items drawn across clusters.
    pub noise_keyphrases: usize,
    pub noise_items: usize,
    pub preferred_subgroups: usize,
    pub interactions_per_user: usize,
    /// Share of a user's interactions drawn from preferred subgroups.
    pub preferred_share: f64,
    /// Share drawn anywhere in the catalog.
    pub noise_share: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    /// 200 users, 100 items, 300 keyphrases.
    fn default() -> Self {
        Self {
            users: 200,
            items: 100,
            clusters: 5,
            subgroups_per_cluster: 4,
            genres_per_cluster: 4,
            genre_coverage: 0.9,
            tags_per_subgroup: 5,
            tag_items: 3,
            attributes_per_item: 1,
            noise_keyphrases: 80,
            noise_items: 3,
            preferred_subgroups: 2,
            interactions_per_user: 12,
            preferred_share: 0.7,
            noise_share: 0.1,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    /// 20 users, 20 items in four 5x5 blocks: every user consumes its whole block.
    pub fn planted_block() -> Self {
        Self {
            users: 20,
            items: 20,
            clusters: 4,
            subgroups_per_cluster: 1,
            genres_per_cluster: 1,
            genre_coverage: 1.0,
            tags_per_subgroup: 2,
            tag_items: 3,
            attributes_per_item: 0,
            noise_keyphrases: 0,
            noise_items: 0,
            preferred_subgroups: 1,
            interactions_per_user: 5,
            preferred_share: 1.0,
            noise_share: 0.0,
            seed: 3,
        }
    }

    pub fn n_keyphrases(&self) -> usize {
        let subgroups = self.clusters * self.subgroups_per_cluster;
        self.clusters * self.genres_per_cluster
            + subgroups * self.tags_per_subgroup
            + self.items * self.attributes_per_item
            + self.noise_keyphrases
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.users == 0 || self.items == 0 || self.clusters == 0 || self.subgroups_per_cluster == 0 {
            return bad("users, items, clusters and subgroups must be positive");
        }
        if !self.items.is_multiple_of(self.clusters * self.subgroups_per_cluster) {
            return bad("items must divide evenly into subgroups");
        }
        let sub_size = self.items / (self.clusters * self.subgroups_per_cluster);
        if self.tag_items > sub_size || self.tag_items == 0 {
            return bad("tag_items must be in 1..=subgroup size");
        }
        if self.noise_items > self.items {
            return bad("noise_items exceeds catalog size");
        }
        if self.noise_keyphrases > 0 && self.noise_items == 0 {
            return bad("noise keyphrases need at least one item each");
        }
        if self.preferred_subgroups == 0 || self.preferred_subgroups > self.subgroups_per_cluster {
            return bad("preferred_subgroups must be in 1..=subgroups_per_cluster");
        }
        for s in [self.genre_coverage, self.preferred_share, self.noise_share] {
            if !(0.0..=1.0).contains(&s) {
                return bad("shares must lie in [0, 1]");
            }
        }
        if self.preferred_share + self.noise_share > 1.0 {
            return bad("preferred_share + noise_share exceeds 1");
        }
        if self.interactions_per_user > self.items {
            return bad("more interactions per user than items");
        }
        Ok(())
    }
}

/// Generated dataset in file-level form (entity ids).
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub items: Vec<EntityId>,
    pub triples: Vec<Triple>,
    pub interactions: Vec<(UserId, EntityId)>,
    pub labels: Vec<(EntityId, String)>,
    /// Home cluster per user.
    pub user_cluster: Vec<usize>,
}

pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let cluster_size = cfg.items / cfg.clusters;
    let sub_size = cluster_size / cfg.subgroups_per_cluster;
    let cluster_items = |c: usize| (c * cluster_size..(c + 1) * cluster_size).collect::<Vec<_>>();
    let subgroup_items = |c: usize, s: usize| {
        let start = c * cluster_size + s * sub_size;
        (start..start + sub_size).collect::<Vec<_>>()
    };

    let mut triples = Vec::new();
    let mut labels = Vec::new();
    let mut next = cfg.items;
    let mut keyphrase = |label: String, labels: &mut Vec<(EntityId, String)>| {
        let e = next;
        next += 1;
        labels.push((EntityId(e), label));
        e
    };

    for c in 0..cfg.clusters {
        let members = cluster_items(c);
        let take = ((cfg.genre_coverage * cluster_size as f64).round() as usize).clamp(1, cluster_size);
        for g in 0..cfg.genres_per_cluster {
            let k = keyphrase(format!("genre-{c}-{g}"), &mut labels);
            for &v in members.choose_multiple(&mut rng, take) {
                triples.push(Triple::new(v, REL_GENRE, k));
            }
        }
    }
    for c in 0..cfg.clusters {
        for s in 0..cfg.subgroups_per_cluster {
            let members = subgroup_items(c, s);
            for t in 0..cfg.tags_per_subgroup {
                let k = keyphrase(format!("tag-{c}-{s}-{t}"), &mut labels);
                for &v in members.choose_multiple(&mut rng, cfg.tag_items) {
                    triples.push(Triple::new(v, REL_TAG, k));
                }
            }
        }
    }
    for v in 0..cfg.items {
        let c = v / cluster_size;
        for a in 0..cfg.attributes_per_item {
            let k = keyphrase(format!("attr-{v}-{a}"), &mut labels);
            triples.push(Triple::new(v, REL_ATTRIBUTE, k));
            if cluster_size > 1 {
                let mut other = c * cluster_size + rng.gen_range(0..cluster_size - 1);
                if other >= v {
                    other += 1;
                }
                triples.push(Triple::new(other, REL_ATTRIBUTE, k));
            }
        }
    }
    let all: Vec<usize> = (0..cfg.items).collect();
    for n in 0..cfg.noise_keyphrases {
        let k = keyphrase(format!("misc-{n}"), &mut labels);
        for &v in all.choose_multiple(&mut rng, cfg.noise_items) {
            triples.push(Triple::new(v, REL_MISC, k));
        }
    }

    let mut interactions = Vec::new();
    let mut user_cluster = Vec::with_capacity(cfg.users);
    let subgroups: Vec<usize> = (0..cfg.subgroups_per_cluster).collect();
    for u in 0..cfg.users {
        // Round-robin home clusters keep the population balanced.
        let c = u % cfg.clusters;
        user_cluster.push(c);
        let preferred: Vec<usize> = subgroups
            .choose_multiple(&mut rng, cfg.preferred_subgroups)
            .flat_map(|&s| subgroup_items(c, s))
            .collect();
        let home = cluster_items(c);
        let n = cfg.interactions_per_user;
        let n_pref = ((cfg.preferred_share * n as f64).round() as usize).min(preferred.len());
        let n_noise = ((cfg.noise_share * n as f64).round() as usize).min(n - n_pref);
        let mut chosen: Vec<usize> = preferred.choose_multiple(&mut rng, n_pref).copied().collect();
        let rest: Vec<usize> = home.iter().copied().filter(|v| !chosen.contains(v)).collect();
        let n_home = (n - n_pref - n_noise).min(rest.len());
        chosen.extend(rest.choose_multiple(&mut rng, n_home).copied());
        let outside: Vec<usize> = all.iter().copied().filter(|v| !chosen.contains(v)).collect();
        chosen.extend(outside.choose_multiple(&mut rng, n - chosen.len()).copied());
        chosen.sort_unstable();
        interactions.extend(chosen.into_iter().map(|v| (UserId(u), EntityId(v))));
    }

    Ok(SyntheticDataset {
        items: (0..cfg.items).map(EntityId).collect(),
        triples,
        interactions,
        labels,
        user_cluster,
    })
}

impl SyntheticDataset {
    pub fn n_users(&self) -> usize {
        self.user_cluster.len()
    }

    /// Materialises the graph and a seeded train/test split.
    pub fn build(&self, max_hop: usize, train_ratio: f64, split_seed: u64) -> Result<(KnowledgeGraph, InteractionSet)> {
        let kg = KnowledgeGraph::new(self.items.clone(), self.triples.clone(), max_hop)?;
        let pairs: Vec<_> = self
            .interactions
            .iter()
            .map(|&(u, e)| (u, kg.item_index(e).expect("generated items are in the graph")))
            .collect();
        let inter = InteractionSet::split(self.n_users(), kg.n_items(), &pairs, train_ratio, split_seed)?;
        Ok((kg, inter))
    }

    /// Writes the triples, items, interactions and label sidecar into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_triples(&dir.join(TRIPLES_FILE), &self.triples)?;
        write_items(&dir.join(ITEMS_FILE), &self.items)?;
        write_interactions(&dir.join(INTERACTIONS_FILE), &self.interactions)?;
        let path = dir.join(LABELS_FILE);
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        for (e, label) in &self.labels {
            writeln!(w, "{e}\t{label}").map_err(|e| Error::io(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))
    }
}

/// Reads an `entity\tlabel` sidecar.
pub fn load_labels(path: &Path) -> Result<Vec<(EntityId, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: &str| Error::Parse {
            path: path.into(),
            line: i + 1,
            msg: msg.into(),
        };
        let (id, label) = line
            .split_once('\t')
            .ok_or_else(|| parse_err("expected `entity<TAB>label`"))?;
        let id: usize = id.trim().parse().map_err(|_| parse_err("bad entity id"))?;
        out.push((EntityId(id), label.trim().to_string()));
    }
    Ok(out)
}
