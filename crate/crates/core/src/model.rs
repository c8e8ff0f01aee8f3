//! Reference base recommender: BPR on user-item pairs plus a translational
//! energy on KG triples, trained jointly with plain SGD.
//!
//! Models trained elsewhere can be plugged in through [`import_embeddings`].

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{Entity, InteractionSet, ItemId, KeyphraseId, KnowledgeGraph, UserId};
use crate::scalar::{dot, log_sigmoid, norm, sigmoid, Scalar};

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_row_norm(&self) -> T {
        (0..self.rows)
            .map(|i| norm(self.row(i)))
            .fold(T::zero(), T::max)
    }

    fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .map(|x| U::lit(x.to_f64_lossy()))
                .collect(),
        }
    }
}

/// User, item, keyphrase and relation embeddings of one trained model.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStore<T> {
    pub users: Matrix<T>,
    pub items: Matrix<T>,
    pub keyphrases: Matrix<T>,
    pub relations: Matrix<T>,
}

impl<T: Scalar> EmbeddingStore<T> {
    pub fn zeros(dim: usize, users: usize, items: usize, keyphrases: usize, relations: usize) -> Self {
        Self {
            users: Matrix::zeros(users, dim),
            items: Matrix::zeros(items, dim),
            keyphrases: Matrix::zeros(keyphrases, dim),
            relations: Matrix::zeros(relations, dim),
        }
    }

    /// Uniform(-1/sqrt(d), 1/sqrt(d)) entries, filled U, V, K, R in order.
    pub fn random(
        dim: usize,
        users: usize,
        items: usize,
        keyphrases: usize,
        relations: usize,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (dim as f64).sqrt();
        let mut store = Self::zeros(dim, users, items, keyphrases, relations);
        for m in store.matrices_mut() {
            for x in m.data.iter_mut() {
                *x = T::lit(rng.gen_range(-bound..bound));
            }
        }
        store
    }

    pub fn dim(&self) -> usize {
        self.users.cols
    }

    pub fn n_users(&self) -> usize {
        self.users.rows
    }

    pub fn n_items(&self) -> usize {
        self.items.rows
    }

    pub fn n_keyphrases(&self) -> usize {
        self.keyphrases.rows
    }

    pub fn n_relations(&self) -> usize {
        self.relations.rows
    }

    pub fn user(&self, u: UserId) -> &[T] {
        self.users.row(u.0)
    }

    pub fn item(&self, v: ItemId) -> &[T] {
        self.items.row(v.0)
    }

    pub fn keyphrase(&self, k: KeyphraseId) -> &[T] {
        self.keyphrases.row(k.0)
    }

    pub fn entity(&self, e: Entity) -> &[T] {
        match e {
            Entity::Item(v) => self.item(v),
            Entity::Keyphrase(k) => self.keyphrase(k),
        }
    }

    fn matrices_mut(&mut self) -> [&mut Matrix<T>; 4] {
        [
            &mut self.users,
            &mut self.items,
            &mut self.keyphrases,
            &mut self.relations,
        ]
    }

    pub fn matrices(&self) -> [&Matrix<T>; 4] {
        [&self.users, &self.items, &self.keyphrases, &self.relations]
    }

    pub fn is_finite(&self) -> bool {
        self.matrices().iter().all(|m| m.is_finite())
    }

    /// Checks row counts against a graph and interaction set.
    pub fn check_shape(&self, kg: &KnowledgeGraph, inter: &InteractionSet) -> Result<()> {
        let expect = [
            ("users", inter.n_users(), self.n_users()),
            ("items", kg.n_items(), self.n_items()),
            ("keyphrases", kg.n_keyphrases(), self.n_keyphrases()),
            ("relations", kg.n_relations(), self.n_relations()),
        ];
        for (name, want, got) in expect {
            if want != got {
                return Err(Error::Shape(format!(
                    "store has {got} {name}, dataset has {want}"
                )));
            }
        }
        Ok(())
    }

    /// Converts every entry to another scalar type.
    pub fn cast<U: Scalar>(&self) -> EmbeddingStore<U> {
        EmbeddingStore {
            users: self.users.cast(),
            items: self.items.cast(),
            keyphrases: self.keyphrases.cast(),
            relations: self.relations.cast(),
        }
    }
}

/// Predicted preference `uᵀv`.
pub fn score<T: Scalar>(u: &[T], v: &[T]) -> Result<T> {
    if u.len() != v.len() {
        return Err(Error::Dimension {
            expected: u.len(),
            got: v.len(),
        });
    }
    Ok(dot(u, v))
}

/// `-log σ(uᵀv⁺ - uᵀv⁻)`.
pub fn bpr_pair_loss<T: Scalar>(u: &[T], pos: &[T], neg: &[T]) -> Result<T> {
    let x = score(u, pos)? - score(u, neg)?;
    Ok(-log_sigmoid(x))
}

/// Loss and gradients of [`bpr_pair_loss`] with respect to `u`, `pos`, `neg`.
pub struct BprGrad<T> {
    pub loss: T,
    pub user: Vec<T>,
    pub pos: Vec<T>,
    pub neg: Vec<T>,
}

pub fn bpr_pair_grad<T: Scalar>(u: &[T], pos: &[T], neg: &[T]) -> BprGrad<T> {
    let x = dot(u, pos) - dot(u, neg);
    let c = -sigmoid(-x);
    BprGrad {
        loss: -log_sigmoid(x),
        user: pos.iter().zip(neg).map(|(&p, &n)| c * (p - n)).collect(),
        pos: u.iter().map(|&ui| c * ui).collect(),
        neg: u.iter().map(|&ui| -c * ui).collect(),
    }
}

fn translation_energy<T: Scalar>(h: &[T], r: &[T], t: &[T]) -> T {
    h.iter()
        .zip(r)
        .zip(t)
        .map(|((&a, &b), &c)| {
            let d = a + b - c;
            d * d
        })
        .sum()
}

/// `-log σ(‖h + r - t′‖² - ‖h + r - t‖²)`: the true tail should sit closer to
/// the translated head than the corrupted one.
pub fn kg_triple_loss<T: Scalar>(h: &[T], r: &[T], t: &[T], t_neg: &[T]) -> Result<T> {
    for x in [r, t, t_neg] {
        if x.len() != h.len() {
            return Err(Error::Dimension {
                expected: h.len(),
                got: x.len(),
            });
        }
    }
    let margin = translation_energy(h, r, t_neg) - translation_energy(h, r, t);
    Ok(-log_sigmoid(margin))
}

pub struct TripleGrad<T> {
    pub loss: T,
    pub head: Vec<T>,
    pub relation: Vec<T>,
    pub tail: Vec<T>,
    pub tail_neg: Vec<T>,
}

pub fn kg_triple_grad<T: Scalar>(h: &[T], r: &[T], t: &[T], t_neg: &[T]) -> TripleGrad<T> {
    let two = T::lit(2.0);
    let margin = translation_energy(h, r, t_neg) - translation_energy(h, r, t);
    let c = -sigmoid(-margin);
    let d = h.len();
    let mut head = Vec::with_capacity(d);
    let mut tail = Vec::with_capacity(d);
    let mut tail_neg = Vec::with_capacity(d);
    for i in 0..d {
        let res_pos = h[i] + r[i] - t[i];
        let res_neg = h[i] + r[i] - t_neg[i];
        head.push(c * two * (res_neg - res_pos));
        tail.push(c * two * res_pos);
        tail_neg.push(-c * two * res_neg);
    }
    TripleGrad {
        loss: -log_sigmoid(margin),
        relation: head.clone(),
        head,
        tail,
        tail_neg,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dim: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub kg_loss_weight: f64,
    pub l2_weight: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            epochs: 40,
            learning_rate: 0.05,
            batch_size: 64,
            kg_loss_weight: 0.5,
            l2_weight: 1e-3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.dim < 2 {
            return Err(Error::Config("dim must be at least 2".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.kg_loss_weight < 0.0 || self.l2_weight < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Per-epoch mean losses recorded during [`train_base`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub epoch_loss: Vec<f64>,
}

#[derive(Copy, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum Row {
    User(usize),
    Item(usize),
    Keyphrase(usize),
    Relation(usize),
}

impl From<Entity> for Row {
    fn from(e: Entity) -> Self {
        match e {
            Entity::Item(v) => Row::Item(v.0),
            Entity::Keyphrase(k) => Row::Keyphrase(k.0),
        }
    }
}

struct GradBuffer<T> {
    rows: BTreeMap<Row, Vec<T>>,
    dim: usize,
}

impl<T: Scalar> GradBuffer<T> {
    fn new(dim: usize) -> Self {
        Self {
            rows: BTreeMap::new(),
            dim,
        }
    }

    fn add(&mut self, row: Row, g: &[T], scale: T) {
        let acc = self
            .rows
            .entry(row)
            .or_insert_with(|| vec![T::zero(); self.dim]);
        for (a, &x) in acc.iter_mut().zip(g) {
            *a = *a + scale * x;
        }
    }

    fn apply(&mut self, store: &mut EmbeddingStore<T>, lr: T) {
        for (row, g) in std::mem::take(&mut self.rows) {
            let target = match row {
                Row::User(i) => store.users.row_mut(i),
                Row::Item(i) => store.items.row_mut(i),
                Row::Keyphrase(i) => store.keyphrases.row_mut(i),
                Row::Relation(i) => store.relations.row_mut(i),
            };
            for (x, gi) in target.iter_mut().zip(g) {
                *x = *x - lr * gi;
            }
        }
    }
}

fn row_of<T: Scalar>(store: &EmbeddingStore<T>, row: Row) -> &[T] {
    match row {
        Row::User(i) => store.users.row(i),
        Row::Item(i) => store.items.row(i),
        Row::Keyphrase(i) => store.keyphrases.row(i),
        Row::Relation(i) => store.relations.row(i),
    }
}

/// Adds `l2/2 * ‖x‖²` for a touched row; returns the loss contribution.
fn add_l2<T: Scalar>(
    buf: &mut GradBuffer<T>,
    store: &EmbeddingStore<T>,
    row: Row,
    l2: T,
) -> T {
    if l2 == T::zero() {
        return T::zero();
    }
    let x = row_of(store, row);
    buf.add(row, x, l2);
    l2 * T::lit(0.5) * dot(x, x)
}

/// Trains the reference base model.
///
/// Each epoch runs shuffled BPR mini-batches (one uniform negative per
/// positive), then, when `kg_loss_weight > 0`, shuffled translational
/// mini-batches with one uniformly corrupted tail per triple.
pub fn train_base<T: Scalar>(
    kg: &KnowledgeGraph,
    inter: &InteractionSet,
    cfg: &TrainConfig,
) -> Result<(EmbeddingStore<T>, TrainReport)> {
    cfg.validate()?;
    if kg.n_items() != inter.n_items() {
        return Err(Error::Shape(format!(
            "graph has {} items, interactions have {}",
            kg.n_items(),
            inter.n_items()
        )));
    }
    let mut store = EmbeddingStore::random(
        cfg.dim,
        inter.n_users(),
        kg.n_items(),
        kg.n_keyphrases(),
        kg.n_relations(),
        cfg.seed,
    );
    let mut report = TrainReport::default();
    if cfg.epochs == 0 {
        return Ok((store, report));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let lr = T::lit(cfg.learning_rate);
    let l2 = T::lit(cfg.l2_weight);
    let kg_w = T::lit(cfg.kg_loss_weight);
    let mut pairs: Vec<(UserId, ItemId)> = inter.train_pairs().collect();
    let n_items = kg.n_items();
    let n_entities = n_items + kg.n_keyphrases();
    let mut triples: Vec<(Entity, usize, Entity)> = if cfg.kg_loss_weight > 0.0 {
        kg.triples()
            .iter()
            .filter_map(|t| {
                Some((kg.entity(t.head)?, t.relation.0, kg.entity(t.tail)?))
            })
            .collect()
    } else {
        Vec::new()
    };
    let mut buf = GradBuffer::new(cfg.dim);

    for epoch in 0..cfg.epochs {
        pairs.shuffle(&mut rng);
        let mut total = T::zero();
        let mut count = 0usize;
        for (b, batch) in pairs.chunks(cfg.batch_size).enumerate() {
            let mut batch_loss = T::zero();
            for &(u, pos) in batch {
                let train = inter.train_items(u);
                if train.len() >= n_items {
                    continue;
                }
                let neg = loop {
                    let cand = ItemId(rng.gen_range(0..n_items));
                    if train.binary_search(&cand).is_err() {
                        break cand;
                    }
                };
                let g = bpr_pair_grad(store.user(u), store.item(pos), store.item(neg));
                batch_loss = batch_loss + g.loss;
                buf.add(Row::User(u.0), &g.user, T::one());
                buf.add(Row::Item(pos.0), &g.pos, T::one());
                buf.add(Row::Item(neg.0), &g.neg, T::one());
                for row in [Row::User(u.0), Row::Item(pos.0), Row::Item(neg.0)] {
                    batch_loss = batch_loss + add_l2(&mut buf, &store, row, l2);
                }
                count += 1;
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "recommendation loss at epoch {epoch}, batch {b}"
                )));
            }
            total = total + batch_loss;
            buf.apply(&mut store, lr);
        }

        if !triples.is_empty() {
            triples.shuffle(&mut rng);
            for (b, batch) in triples.chunks(cfg.batch_size).enumerate() {
                let mut batch_loss = T::zero();
                for &(h, r, t) in batch {
                    let corrupt = loop {
                        let i = rng.gen_range(0..n_entities);
                        let e = if i < n_items {
                            Entity::Item(ItemId(i))
                        } else {
                            Entity::Keyphrase(KeyphraseId(i - n_items))
                        };
                        if e != t || n_entities == 1 {
                            break e;
                        }
                    };
                    let g = kg_triple_grad(
                        store.entity(h),
                        store.relations.row(r),
                        store.entity(t),
                        store.entity(corrupt),
                    );
                    batch_loss = batch_loss + kg_w * g.loss;
                    buf.add(h.into(), &g.head, kg_w);
                    buf.add(Row::Relation(r), &g.relation, kg_w);
                    buf.add(t.into(), &g.tail, kg_w);
                    buf.add(corrupt.into(), &g.tail_neg, kg_w);
                    for row in [h.into(), t.into(), corrupt.into(), Row::Relation(r)] {
                        batch_loss = batch_loss + add_l2(&mut buf, &store, row, l2);
                    }
                    count += 1;
                }
                if !batch_loss.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "KG loss at epoch {epoch}, batch {b}"
                    )));
                }
                total = total + batch_loss;
                buf.apply(&mut store, lr);
            }
        }
        if !store.is_finite() {
            return Err(Error::NonFinite(format!("embeddings after epoch {epoch}")));
        }
        report
            .epoch_loss
            .push(total.to_f64_lossy() / count.max(1) as f64);
    }
    Ok((store, report))
}

/// Magic string opening an embedding file header.
pub const EMBEDDING_MAGIC: &str = "IPGC-EMB";
pub const IMPORTANCE_MAGIC: &str = "IPGC-OMEGA";
const FORMAT_VERSION: &str = "v1";

pub(crate) fn write_f32_payload<'a, T: Scalar, W: Write>(
    w: &mut W,
    values: impl Iterator<Item = &'a T>,
) -> std::io::Result<()> {
    for x in values {
        w.write_all(&x.to_f32_lossy().to_le_bytes())?;
    }
    Ok(())
}

/// Reads a text header line and returns its whitespace-separated integer fields.
pub(crate) fn read_header(
    r: &mut BufReader<File>,
    path: &Path,
    magic: &str,
    n_fields: usize,
) -> Result<Vec<usize>> {
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line)
        .map_err(|e| Error::io(path, e))?;
    let text = std::str::from_utf8(&line).map_err(|_| Error::Parse {
        path: path.into(),
        line: 1,
        msg: "header is not UTF-8".into(),
    })?;
    let fields: Vec<&str> = text.split_whitespace().collect();
    if fields.len() != n_fields + 2 || fields[0] != magic || fields[1] != FORMAT_VERSION {
        return Err(Error::Parse {
            path: path.into(),
            line: 1,
            msg: format!(
                "expected header `{magic} {FORMAT_VERSION}` with {n_fields} sizes, found {:?}",
                text.trim_end()
            ),
        });
    }
    fields[2..]
        .iter()
        .map(|f| {
            f.parse::<usize>().map_err(|_| Error::Parse {
                path: path.into(),
                line: 1,
                msg: format!("bad header size {f:?}"),
            })
        })
        .collect()
}

pub(crate) fn read_f32_payload<T: Scalar>(
    r: &mut BufReader<File>,
    path: &Path,
    count: usize,
) -> Result<Vec<T>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    let expected = count
        .checked_mul(4)
        .ok_or_else(|| Error::Shape("header sizes overflow".into()))?;
    if bytes.len() < expected {
        return Err(Error::Shape(format!(
            "truncated payload: expected {expected} bytes, found {}",
            bytes.len()
        )));
    }
    if bytes.len() > expected {
        return Err(Error::Shape(format!(
            "payload has {} trailing bytes beyond the header sizes",
            bytes.len() - expected
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| T::of_f32(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect())
}

/// Writes `IPGC-EMB v1 <dim> <users> <items> <keyphrases> <relations>` then
/// little-endian `f32` rows of U, V, K, R.
pub fn export_embeddings<T: Scalar>(store: &EmbeddingStore<T>, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(
        w,
        "{EMBEDDING_MAGIC} {FORMAT_VERSION} {} {} {} {} {}",
        store.dim(),
        store.n_users(),
        store.n_items(),
        store.n_keyphrases(),
        store.n_relations()
    )
    .map_err(io)?;
    for m in store.matrices() {
        write_f32_payload(&mut w, m.as_slice().iter()).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn import_embeddings<T: Scalar>(path: &Path) -> Result<EmbeddingStore<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let h = read_header(&mut r, path, EMBEDDING_MAGIC, 5)?;
    let (dim, counts) = (h[0], [h[1], h[2], h[3], h[4]]);
    let total: usize = counts.iter().sum::<usize>() * dim;
    let mut data = read_f32_payload::<T>(&mut r, path, total)?.into_iter();
    let mut take = |rows: usize| Matrix::from_vec(rows, dim, data.by_ref().take(rows * dim).collect());
    Ok(EmbeddingStore {
        users: take(counts[0])?,
        items: take(counts[1])?,
        keyphrases: take(counts[2])?,
        relations: take(counts[3])?,
    })
}
