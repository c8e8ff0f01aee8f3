//! Knowledge graph, user-item interactions and multi-hop neighborhoods.
//!
//! KG entities are split into two classes: items (listed in the items file)
//! and keyphrases (every other entity that appears in a triple). Each class
//! gets its own dense index space.
//!
//! Hop distance from a keyphrase `k` to an item `v` is the minimum number of
//! item nodes on an undirected path from `k` to `v` whose first step lands on
//! an item, counting `v` itself. Items linked directly to `k` are hop 1,
//! items sharing any keyphrase with a hop-1 item are hop 2, and so on. Each
//! item is stored only under its shortest hop, so hop sets are disjoint.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default maximum hop for proxy sampling.
pub const DEFAULT_MAX_HOP: usize = 2;

macro_rules! dense_id {
    ($(#[$m:meta])* $name:ident) => {
        $(#[$m])*
        #[derive(
            Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub usize);

        impl $name {
            #[inline]
            pub fn index(self) -> usize {
                self.0
            }
        }

        impl std::fmt::Display for $name {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                write!(f, "{}", self.0)
            }
        }
    };
}

dense_id!(
    /// Dense user index in `[0, n_users)`.
    UserId
);
dense_id!(
    /// Dense item index in `[0, n_items)`.
    ItemId
);
dense_id!(
    /// Dense keyphrase index in `[0, n_keyphrases)`.
    KeyphraseId
);
dense_id!(
    /// Dense relation index in `[0, n_relations)`.
    RelationId
);
dense_id!(
    /// Raw KG entity id as it appears in the triples file.
    EntityId
);

/// Class-resolved KG entity.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum Entity {
    Item(ItemId),
    Keyphrase(KeyphraseId),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

impl Triple {
    pub fn new(head: usize, relation: usize, tail: usize) -> Self {
        Self {
            head: EntityId(head),
            relation: RelationId(relation),
            tail: EntityId(tail),
        }
    }
}

/// Immutable triple store with per-keyphrase hop sets.
#[derive(Debug)]
pub struct KnowledgeGraph {
    triples: Vec<Triple>,
    n_relations: usize,
    classes: HashMap<EntityId, Entity>,
    item_entities: Vec<EntityId>,
    keyphrase_entities: Vec<EntityId>,
    /// Undirected neighbor lists over class-resolved entities, sorted and deduplicated.
    item_adj: Vec<Vec<Entity>>,
    keyphrase_adj: Vec<Vec<Entity>>,
    /// `hop_index[k][h - 1]` holds the items at exactly hop `h`, ascending.
    hop_index: Vec<Vec<Vec<ItemId>>>,
    max_hop: usize,
    triple_reads: AtomicUsize,
}

impl KnowledgeGraph {
    /// Builds a graph from item entity ids (item `i` is `items[i]`) and triples.
    pub fn new(items: Vec<EntityId>, triples: Vec<Triple>, max_hop: usize) -> Result<Self> {
        if max_hop == 0 {
            return Err(Error::Config("max hop must be at least 1".into()));
        }
        let mut classes = HashMap::with_capacity(items.len());
        for (i, &e) in items.iter().enumerate() {
            if classes.insert(e, Entity::Item(ItemId(i))).is_some() {
                return Err(Error::Validation(format!("item entity {e} listed twice")));
            }
        }
        for (i, t) in triples.iter().enumerate() {
            if t.head == t.tail {
                return Err(Error::Validation(format!(
                    "triple {i} is a self-loop on entity {}",
                    t.head
                )));
            }
        }

        let mut others = BTreeSet::new();
        for t in &triples {
            for e in [t.head, t.tail] {
                if !classes.contains_key(&e) {
                    others.insert(e);
                }
            }
        }
        let keyphrase_entities: Vec<EntityId> = others.into_iter().collect();
        for (i, &e) in keyphrase_entities.iter().enumerate() {
            classes.insert(e, Entity::Keyphrase(KeyphraseId(i)));
        }

        let n_relations = triples.iter().map(|t| t.relation.0 + 1).max().unwrap_or(0);
        let mut item_adj = vec![Vec::new(); items.len()];
        let mut keyphrase_adj = vec![Vec::new(); keyphrase_entities.len()];
        for t in &triples {
            let h = classes[&t.head];
            let tl = classes[&t.tail];
            for (a, b) in [(h, tl), (tl, h)] {
                match a {
                    Entity::Item(v) => item_adj[v.0].push(b),
                    Entity::Keyphrase(k) => keyphrase_adj[k.0].push(b),
                }
            }
        }
        for list in item_adj.iter_mut().chain(keyphrase_adj.iter_mut()) {
            list.sort_by_key(entity_sort_key);
            list.dedup();
        }

        let mut kg = Self {
            triples,
            n_relations,
            classes,
            item_entities: items,
            keyphrase_entities,
            item_adj,
            keyphrase_adj,
            hop_index: Vec::new(),
            max_hop,
            triple_reads: AtomicUsize::new(0),
        };
        kg.hop_index = kg.build_hop_index();
        Ok(kg)
    }

    fn build_hop_index(&self) -> Vec<Vec<Vec<ItemId>>> {
        let n_items = self.n_items();
        let n_kp = self.n_keyphrases();
        // Flat node numbering: items first, then keyphrases.
        let node = |e: Entity| match e {
            Entity::Item(v) => v.0,
            Entity::Keyphrase(k) => n_items + k.0,
        };
        let mut dist = vec![usize::MAX; n_items + n_kp];
        let mut touched = Vec::new();
        let mut queue = VecDeque::new();
        let mut index = Vec::with_capacity(n_kp);

        for k in 0..n_kp {
            let mut hops = vec![Vec::new(); self.max_hop];
            for &e in &self.keyphrase_adj[k] {
                if let Entity::Item(v) = e {
                    dist[v.0] = 1;
                    touched.push(v.0);
                    queue.push_back((e, 1usize));
                }
            }
            // 0-1 BFS: entering an item costs one hop, entering a keyphrase is free.
            while let Some((e, d)) = queue.pop_front() {
                if d > dist[node(e)] {
                    continue;
                }
                for &next in self.neighbors(e) {
                    let (cost, front) = match next {
                        Entity::Item(_) => (1, false),
                        Entity::Keyphrase(_) => (0, true),
                    };
                    let nd = d + cost;
                    let slot = node(next);
                    if nd > self.max_hop || nd >= dist[slot] {
                        continue;
                    }
                    if dist[slot] == usize::MAX {
                        touched.push(slot);
                    }
                    dist[slot] = nd;
                    if front {
                        queue.push_front((next, nd));
                    } else {
                        queue.push_back((next, nd));
                    }
                }
            }
            for &slot in &touched {
                if slot < n_items {
                    hops[dist[slot] - 1].push(ItemId(slot));
                }
                dist[slot] = usize::MAX;
            }
            touched.clear();
            for h in &mut hops {
                h.sort_unstable();
            }
            index.push(hops);
        }
        index
    }

    fn neighbors(&self, e: Entity) -> &[Entity] {
        match e {
            Entity::Item(v) => &self.item_adj[v.0],
            Entity::Keyphrase(k) => &self.keyphrase_adj[k.0],
        }
    }

    pub fn n_items(&self) -> usize {
        self.item_entities.len()
    }

    pub fn n_keyphrases(&self) -> usize {
        self.keyphrase_entities.len()
    }

    pub fn n_relations(&self) -> usize {
        self.n_relations
    }

    pub fn max_hop(&self) -> usize {
        self.max_hop
    }

    /// Triples as loaded. Every call is counted; see [`Self::triple_reads`].
    pub fn triples(&self) -> &[Triple] {
        self.triple_reads.fetch_add(1, Ordering::Relaxed);
        &self.triples
    }

    pub fn n_triples(&self) -> usize {
        self.triples.len()
    }

    /// Number of times [`Self::triples`] has been called.
    pub fn triple_reads(&self) -> usize {
        self.triple_reads.load(Ordering::Relaxed)
    }

    pub fn entity(&self, e: EntityId) -> Option<Entity> {
        self.classes.get(&e).copied()
    }

    /// Resolves a raw entity id that must be a keyphrase.
    pub fn keyphrase_of(&self, e: EntityId) -> Result<KeyphraseId> {
        match self.entity(e) {
            Some(Entity::Keyphrase(k)) => Ok(k),
            Some(Entity::Item(v)) => Err(Error::Class(format!(
                "entity {e} is item {v}, expected a keyphrase"
            ))),
            None => Err(Error::Validation(format!("entity {e} is not in the graph"))),
        }
    }

    /// Resolves a raw entity id that must be an item.
    pub fn item_of(&self, e: EntityId) -> Result<ItemId> {
        match self.entity(e) {
            Some(Entity::Item(v)) => Ok(v),
            Some(Entity::Keyphrase(k)) => Err(Error::Class(format!(
                "entity {e} is keyphrase {k}, expected an item"
            ))),
            None => Err(Error::Validation(format!("entity {e} is not an item"))),
        }
    }

    pub fn item_entity(&self, v: ItemId) -> EntityId {
        self.item_entities[v.0]
    }

    pub fn keyphrase_entity(&self, k: KeyphraseId) -> EntityId {
        self.keyphrase_entities[k.0]
    }

    /// Items at exactly `hop` from keyphrase `k`, ascending.
    pub fn multihop_items(&self, k: KeyphraseId, hop: usize) -> Result<&[ItemId]> {
        let hops = self
            .hop_index
            .get(k.0)
            .ok_or_else(|| Error::Validation(format!("keyphrase {k} out of range")))?;
        if hop == 0 || hop > self.max_hop {
            return Err(Error::Validation(format!(
                "hop {hop} outside 1..={}",
                self.max_hop
            )));
        }
        Ok(&hops[hop - 1])
    }

    /// [`Self::multihop_items`] for a raw entity id; items are rejected with a class error.
    pub fn multihop_items_of(&self, e: EntityId, hop: usize) -> Result<&[ItemId]> {
        let k = self.keyphrase_of(e)?;
        self.multihop_items(k, hop)
    }

    /// Keyphrases directly linked to item `v`, ascending.
    pub fn item_keyphrases(&self, v: ItemId) -> impl Iterator<Item = KeyphraseId> + '_ {
        self.item_adj[v.0].iter().filter_map(|e| match e {
            Entity::Keyphrase(k) => Some(*k),
            Entity::Item(_) => None,
        })
    }

    /// Number of distinct undirected KG neighbors of keyphrase `k`.
    pub fn keyphrase_degree(&self, k: KeyphraseId) -> usize {
        self.keyphrase_adj[k.0].len()
    }

    pub fn item_index(&self, e: EntityId) -> Option<ItemId> {
        match self.entity(e) {
            Some(Entity::Item(v)) => Some(v),
            _ => None,
        }
    }
}

fn entity_sort_key(e: &Entity) -> (u8, usize) {
    match *e {
        Entity::Item(v) => (0, v.0),
        Entity::Keyphrase(k) => (1, k.0),
    }
}

/// Train/test split of implicit user-item interactions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InteractionSet {
    n_items: usize,
    train: Vec<Vec<ItemId>>,
    test: Vec<Vec<ItemId>>,
}

impl InteractionSet {
    /// Splits `pairs` per user: a seeded shuffle, then `round(ratio * n)` to train,
    /// clamped so any user with at least two items keeps one on each side.
    /// Users with a single interaction go wholly to train.
    pub fn split(
        n_users: usize,
        n_items: usize,
        pairs: &[(UserId, ItemId)],
        ratio: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(ratio > 0.0 && ratio < 1.0) {
            return Err(Error::Config(format!("split ratio {ratio} not in (0, 1)")));
        }
        let mut per_user: Vec<BTreeSet<ItemId>> = vec![BTreeSet::new(); n_users];
        for &(u, v) in pairs {
            if u.0 >= n_users {
                return Err(Error::Validation(format!("user {u} out of range")));
            }
            if v.0 >= n_items {
                return Err(Error::Validation(format!("item {v} out of range")));
            }
            per_user[u.0].insert(v);
        }
        let mut train = Vec::with_capacity(n_users);
        let mut test = Vec::with_capacity(n_users);
        for (u, items) in per_user.into_iter().enumerate() {
            let mut items: Vec<ItemId> = items.into_iter().collect();
            let n = items.len();
            if n < 2 {
                train.push(items);
                test.push(Vec::new());
                continue;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(u as u64);
            items.shuffle(&mut rng);
            let n_train = ((ratio * n as f64).round() as usize).clamp(1, n - 1);
            let mut te = items.split_off(n_train);
            items.sort_unstable();
            te.sort_unstable();
            train.push(items);
            test.push(te);
        }
        Ok(Self {
            n_items,
            train,
            test,
        })
    }

    /// Builds a set from explicit per-user lists. Lists are sorted and deduplicated.
    pub fn from_lists(
        n_items: usize,
        mut train: Vec<Vec<ItemId>>,
        mut test: Vec<Vec<ItemId>>,
    ) -> Result<Self> {
        if train.len() != test.len() {
            return Err(Error::Shape("train/test user counts differ".into()));
        }
        for (u, (tr, te)) in train.iter_mut().zip(test.iter_mut()).enumerate() {
            for list in [&mut *tr, &mut *te] {
                list.sort_unstable();
                list.dedup();
                if let Some(v) = list.iter().find(|v| v.0 >= n_items) {
                    return Err(Error::Validation(format!("item {v} out of range")));
                }
            }
            if tr.iter().any(|v| te.binary_search(v).is_ok()) {
                return Err(Error::Validation(format!(
                    "user {u} has an item in both train and test"
                )));
            }
        }
        Ok(Self {
            n_items,
            train,
            test,
        })
    }

    pub fn n_users(&self) -> usize {
        self.train.len()
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn train_items(&self, u: UserId) -> &[ItemId] {
        &self.train[u.0]
    }

    pub fn test_items(&self, u: UserId) -> &[ItemId] {
        &self.test[u.0]
    }

    pub fn is_train(&self, u: UserId, v: ItemId) -> bool {
        self.train[u.0].binary_search(&v).is_ok()
    }

    /// All training pairs, ordered by user then item.
    pub fn train_pairs(&self) -> impl Iterator<Item = (UserId, ItemId)> + '_ {
        self.train
            .iter()
            .enumerate()
            .flat_map(|(u, items)| items.iter().map(move |&v| (UserId(u), v)))
    }

    pub fn n_train(&self) -> usize {
        self.train.iter().map(Vec::len).sum()
    }

    pub fn n_test(&self) -> usize {
        self.test.iter().map(Vec::len).sum()
    }
}

fn open_lines(path: &Path) -> Result<impl Iterator<Item = (usize, Result<String>)> + '_> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(BufReader::new(file)
        .lines()
        .enumerate()
        .map(move |(i, l)| (i + 1, l.map_err(|e| Error::io(path, e)))))
}

fn parse_fields<const N: usize>(
    path: &Path,
    line_no: usize,
    line: &str,
    optional_tail: usize,
) -> Result<Vec<f64>> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() < N || fields.len() > N + optional_tail {
        return Err(Error::Parse {
            path: path.into(),
            line: line_no,
            msg: format!("expected {N} fields, found {}", fields.len()),
        });
    }
    fields
        .iter()
        .map(|f| {
            f.parse::<f64>().map_err(|_| Error::Parse {
                path: path.into(),
                line: line_no,
                msg: format!("invalid number {f:?}"),
            })
        })
        .collect()
}

fn as_id(path: &Path, line: usize, x: f64) -> Result<usize> {
    if x >= 0.0 && x.fract() == 0.0 && x < 1e15 {
        Ok(x as usize)
    } else {
        Err(Error::Parse {
            path: path.into(),
            line,
            msg: format!("{x} is not a non-negative integer id"),
        })
    }
}

/// Loads `head\trelation\ttail` triples and the item entity list.
pub fn load_graph(triples_path: &Path, items_path: &Path, max_hop: usize) -> Result<KnowledgeGraph> {
    let mut items = Vec::new();
    for (no, line) in open_lines(items_path)? {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f = parse_fields::<1>(items_path, no, &line, 0)?;
        items.push(EntityId(as_id(items_path, no, f[0])?));
    }
    let mut triples = Vec::new();
    for (no, line) in open_lines(triples_path)? {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f = parse_fields::<3>(triples_path, no, &line, 0)?;
        triples.push(Triple::new(
            as_id(triples_path, no, f[0])?,
            as_id(triples_path, no, f[1])?,
            as_id(triples_path, no, f[2])?,
        ));
    }
    KnowledgeGraph::new(items, triples, max_hop)
}

/// Rating threshold applied when the interactions file carries a third column.
pub const DEFAULT_RATING_THRESHOLD: f64 = 1.0;

/// Loads `user\titem` lines (item given as KG entity id) and splits them.
///
/// An optional third column is read as an explicit rating; rows below
/// [`DEFAULT_RATING_THRESHOLD`] are dropped.
pub fn load_interactions(
    path: &Path,
    kg: &KnowledgeGraph,
    ratio: f64,
    seed: u64,
) -> Result<InteractionSet> {
    let mut pairs = Vec::new();
    let mut n_users = 0;
    for (no, line) in open_lines(path)? {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f = parse_fields::<2>(path, no, &line, 1)?;
        if f.len() == 3 && f[2] < DEFAULT_RATING_THRESHOLD {
            continue;
        }
        let u = as_id(path, no, f[0])?;
        let e = EntityId(as_id(path, no, f[1])?);
        let v = kg.item_index(e).ok_or_else(|| {
            Error::Validation(format!("{}:{no}: entity {e} is not an item", path.display()))
        })?;
        n_users = n_users.max(u + 1);
        pairs.push((UserId(u), v));
    }
    InteractionSet::split(n_users, kg.n_items(), &pairs, ratio, seed)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).map_err(|e| Error::io(path, e))?,
    ))
}

pub fn write_triples(path: &Path, triples: &[Triple]) -> Result<()> {
    let mut w = create(path)?;
    for t in triples {
        writeln!(w, "{}\t{}\t{}", t.head, t.relation, t.tail).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_items(path: &Path, items: &[EntityId]) -> Result<()> {
    let mut w = create(path)?;
    for e in items {
        writeln!(w, "{e}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `user\titem_entity` lines.
pub fn write_interactions(path: &Path, pairs: &[(UserId, EntityId)]) -> Result<()> {
    let mut w = create(path)?;
    for (u, e) in pairs {
        writeln!(w, "{u}\t{e}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
