//! On-disk dataset format.
//!
//! A dataset directory holds tab-separated UTF-8 text files
//! `ent_ids_1`, `ent_ids_2` (id<TAB>uri), `triples_1`, `triples_2`
//! (head<TAB>relation<TAB>tail), `ill_ent_ids` (left<TAB>right),
//! `attrs_1`, `attrs_2` (uri<TAB>token...), and optional binary
//! `visual_1.bin` / `visual_2.bin` files: little-endian u32 count,
//! u32 dim, then `count` records of (u32 entity id, dim × f32).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::{
    apply_visual_features, build_bow_features, split_seeds, DataError, Matrix, MultiModalKG,
    SeedAlignments,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestOptions {
    /// Bag-of-words vocabulary cap for attribute tokens.
    pub attr_cap: usize,
    /// Bag-of-words vocabulary cap for relation tokens.
    pub rel_cap: usize,
    /// Visual dimension used when no feature file is present.
    pub visual_dim: usize,
    /// Seed for random visual rows of entities without images.
    pub visual_seed: u64,
    pub train_ratio: f64,
    pub split_seed: u64,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions {
            attr_cap: 1000,
            rel_cap: 1000,
            visual_dim: 4096,
            visual_seed: 17,
            train_ratio: 0.3,
            split_seed: 17,
        }
    }
}

fn open(path: &Path) -> Result<BufReader<File>, DataError> {
    match File::open(path) {
        Ok(f) => Ok(BufReader::new(f)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            Err(DataError::MissingFile(path.display().to_string()))
        }
        Err(e) => Err(DataError::Io {
            path: path.display().to_string(),
            source: e,
        }),
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> DataError {
    DataError::Parse {
        file: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

struct RawGraph {
    /// original id -> dense index, in file order
    id_map: BTreeMap<u64, usize>,
    entity_count: usize,
    /// triples over dense entity ids, original relation ids
    triples_orig: Vec<(usize, u64, usize)>,
    attr_tokens: Vec<Vec<String>>,
}

fn read_entities(path: &Path) -> Result<(BTreeMap<u64, usize>, BTreeMap<String, usize>), DataError> {
    let mut id_map = BTreeMap::new();
    let mut uri_map = BTreeMap::new();
    for (ln, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| DataError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.splitn(2, '\t');
        let id: u64 = it
            .next()
            .unwrap()
            .trim()
            .parse()
            .map_err(|_| parse_err(path, ln + 1, "bad entity id"))?;
        let uri = it
            .next()
            .ok_or_else(|| parse_err(path, ln + 1, "missing uri"))?
            .to_string();
        let idx = id_map.len();
        if id_map.insert(id, idx).is_some() {
            return Err(parse_err(path, ln + 1, format!("duplicate entity id {id}")));
        }
        if uri_map.insert(uri, idx).is_some() {
            return Err(parse_err(path, ln + 1, "duplicate entity uri"));
        }
    }
    Ok((id_map, uri_map))
}

fn read_graph(root: &Path, suffix: &str) -> Result<RawGraph, DataError> {
    let (id_map, uri_map) = read_entities(&root.join(format!("ent_ids_{suffix}")))?;
    let entity_count = id_map.len();

    let tri_path = root.join(format!("triples_{suffix}"));
    let mut triples_orig = Vec::new();
    for (ln, line) in open(&tri_path)?.lines().enumerate() {
        let line = line.map_err(|e| DataError::Io {
            path: tri_path.display().to_string(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 3 {
            return Err(parse_err(&tri_path, ln + 1, "expected head<TAB>relation<TAB>tail"));
        }
        let h: u64 = parts[0]
            .trim()
            .parse()
            .map_err(|_| parse_err(&tri_path, ln + 1, "bad head id"))?;
        let r: u64 = parts[1]
            .trim()
            .parse()
            .map_err(|_| parse_err(&tri_path, ln + 1, "bad relation id"))?;
        let t: u64 = parts[2]
            .trim()
            .parse()
            .map_err(|_| parse_err(&tri_path, ln + 1, "bad tail id"))?;
        let hd = *id_map.get(&h).ok_or(DataError::DanglingId {
            id: h.to_string(),
            context: format!("triples_{suffix}"),
        })?;
        let tl = *id_map.get(&t).ok_or(DataError::DanglingId {
            id: t.to_string(),
            context: format!("triples_{suffix}"),
        })?;
        triples_orig.push((hd, r, tl));
    }

    let attr_path = root.join(format!("attrs_{suffix}"));
    let mut attr_tokens = vec![Vec::new(); entity_count];
    for line in open(&attr_path)?.lines() {
        let line = line.map_err(|e| DataError::Io {
            path: attr_path.display().to_string(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split('\t');
        let uri = it.next().unwrap();
        let idx = *uri_map.get(uri).ok_or_else(|| DataError::DanglingId {
            id: uri.to_string(),
            context: format!("attrs_{suffix}"),
        })?;
        attr_tokens[idx] = it
            .filter(|t| !t.is_empty())
            .map(str::to_string)
            .collect();
    }

    Ok(RawGraph {
        id_map,
        entity_count,
        triples_orig,
        attr_tokens,
    })
}

fn read_visual_bin(path: &Path) -> Result<(usize, Vec<(u64, Vec<f64>)>), DataError> {
    let mut f = open(path)?;
    let io_err = |e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let count = f.read_u32::<LittleEndian>().map_err(io_err)?;
    let dim = f.read_u32::<LittleEndian>().map_err(io_err)? as usize;
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let id = f.read_u32::<LittleEndian>().map_err(io_err)? as u64;
        let mut v = vec![0.0f64; dim];
        for x in v.iter_mut() {
            *x = f.read_f32::<LittleEndian>().map_err(io_err)? as f64;
        }
        entries.push((id, v));
    }
    // trailing bytes indicate a malformed file
    let mut rest = [0u8; 1];
    if f.read(&mut rest).map_err(io_err)? != 0 {
        return Err(parse_err(path, 0, "trailing bytes in visual feature file"));
    }
    Ok((dim, entries))
}

/// Load visual features for one graph from a feature file keyed by
/// dense entity index; entities missing from the file (or the whole
/// file) get seeded random rows.
pub fn load_visual_features(
    kg: &mut MultiModalKG,
    feature_file: Option<&Path>,
    default_dim: usize,
    rng_seed: u64,
) -> Result<(), DataError> {
    match feature_file {
        Some(path) => {
            let (dim, entries) = read_visual_bin(path)?;
            let mapped: Vec<(usize, Vec<f64>)> = entries
                .into_iter()
                .map(|(id, v)| (id as usize, v))
                .collect();
            apply_visual_features(kg, &mapped, dim, rng_seed)
        }
        None => apply_visual_features(kg, &[], default_dim, rng_seed),
    }
}

/// Load the full dataset directory: two graphs with dense disjoint
/// index spaces and the seed alignments, split per the options.
pub fn load_dataset(
    root: &Path,
    opts: &IngestOptions,
) -> Result<(MultiModalKG, MultiModalKG, SeedAlignments), DataError> {
    let g1 = read_graph(root, "1")?;
    let g2 = read_graph(root, "2")?;

    // alignment pairs
    let ill_path = root.join("ill_ent_ids");
    let mut pairs = Vec::new();
    let mut seen_left = std::collections::BTreeSet::new();
    let mut seen_right = std::collections::BTreeSet::new();
    for (ln, line) in open(&ill_path)?.lines().enumerate() {
        let line = line.map_err(|e| DataError::Io {
            path: ill_path.display().to_string(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 2 {
            return Err(parse_err(&ill_path, ln + 1, "expected left<TAB>right"));
        }
        let l: u64 = parts[0]
            .trim()
            .parse()
            .map_err(|_| parse_err(&ill_path, ln + 1, "bad left id"))?;
        let r: u64 = parts[1]
            .trim()
            .parse()
            .map_err(|_| parse_err(&ill_path, ln + 1, "bad right id"))?;
        let li = *g1.id_map.get(&l).ok_or(DataError::DanglingId {
            id: l.to_string(),
            context: "ill_ent_ids left".into(),
        })?;
        let ri = *g2.id_map.get(&r).ok_or(DataError::DanglingId {
            id: r.to_string(),
            context: "ill_ent_ids right".into(),
        })?;
        if !seen_left.insert(li) {
            return Err(DataError::DuplicateAlignment {
                id: l.to_string(),
                side: "left",
            });
        }
        if !seen_right.insert(ri) {
            return Err(DataError::DuplicateAlignment {
                id: r.to_string(),
                side: "right",
            });
        }
        pairs.push((li, ri));
    }

    // dense relation ids, per graph, sorted by original id
    let remap_relations = |raw: &RawGraph| -> (Vec<(usize, usize, usize)>, usize) {
        let mut rel_ids: Vec<u64> = raw.triples_orig.iter().map(|t| t.1).collect();
        rel_ids.sort_unstable();
        rel_ids.dedup();
        let map: BTreeMap<u64, usize> = rel_ids.iter().enumerate().map(|(i, &r)| (r, i)).collect();
        let triples = raw
            .triples_orig
            .iter()
            .map(|&(h, r, t)| (h, map[&r], t))
            .collect();
        (triples, rel_ids.len())
    };
    let (triples1, relcount1) = remap_relations(&g1);
    let (triples2, relcount2) = remap_relations(&g2);

    // shared attribute vocabulary over both graphs
    let mut attr_corpus = g1.attr_tokens.clone();
    attr_corpus.extend(g2.attr_tokens.iter().cloned());
    let (attr_all, _) = build_bow_features(&attr_corpus, opts.attr_cap);
    let attr1 = take_rows(&attr_all, 0, g1.entity_count);
    let attr2 = take_rows(&attr_all, g1.entity_count, g2.entity_count);

    // relation participation tokens keyed by original relation id so
    // that datasets sharing a relation space share columns
    let rel_token_lists = |raw: &RawGraph| -> Vec<Vec<String>> {
        let mut toks = vec![std::collections::BTreeSet::new(); raw.entity_count];
        for &(h, r, t) in &raw.triples_orig {
            toks[h].insert(format!("r{r:010}"));
            toks[t].insert(format!("r{r:010}"));
        }
        toks.into_iter().map(|s| s.into_iter().collect()).collect()
    };
    let mut rel_corpus = rel_token_lists(&g1);
    rel_corpus.extend(rel_token_lists(&g2));
    let (rel_all, _) = build_bow_features(&rel_corpus, opts.rel_cap);
    let rel1 = take_rows(&rel_all, 0, g1.entity_count);
    let rel2 = take_rows(&rel_all, g1.entity_count, g2.entity_count);

    let mut kg1 = MultiModalKG {
        entity_count: g1.entity_count,
        relation_count: relcount1,
        triples: triples1,
        attr_features: attr1,
        rel_features: rel1,
        visual_features: Matrix::zeros(g1.entity_count, 0),
        visual_present: vec![false; g1.entity_count],
    };
    let mut kg2 = MultiModalKG {
        entity_count: g2.entity_count,
        relation_count: relcount2,
        triples: triples2,
        attr_features: attr2,
        rel_features: rel2,
        visual_features: Matrix::zeros(g2.entity_count, 0),
        visual_present: vec![false; g2.entity_count],
    };

    // visual features; both graphs must agree on the dimension
    let load_vis = |kg: &mut MultiModalKG,
                    raw: &RawGraph,
                    suffix: &str,
                    dim_hint: usize,
                    seed: u64|
     -> Result<usize, DataError> {
        let path = root.join(format!("visual_{suffix}.bin"));
        if path.exists() {
            let (dim, entries) = read_visual_bin(&path)?;
            let mut mapped = Vec::with_capacity(entries.len());
            for (id, v) in entries {
                let idx = *raw.id_map.get(&id).ok_or(DataError::DanglingId {
                    id: id.to_string(),
                    context: format!("visual_{suffix}.bin"),
                })?;
                mapped.push((idx, v));
            }
            apply_visual_features(kg, &mapped, dim, seed)?;
            Ok(dim)
        } else {
            apply_visual_features(kg, &[], dim_hint, seed)?;
            Ok(dim_hint)
        }
    };
    let dim1 = load_vis(&mut kg1, &g1, "1", opts.visual_dim, opts.visual_seed)?;
    let dim2 = load_vis(&mut kg2, &g2, "2", dim1, opts.visual_seed.wrapping_add(1))?;
    if dim1 != dim2 {
        return Err(DataError::DimMismatch {
            expected: dim1,
            got: dim2,
        });
    }

    // a single pair cannot be split; it becomes the training seed
    let seeds = if pairs.len() < 2 {
        super::SeedAlignments {
            split: vec![super::Split::Train; pairs.len()],
            pairs,
        }
    } else {
        split_seeds(&pairs, opts.train_ratio, opts.split_seed)?
    };
    kg1.validate()?;
    kg2.validate()?;
    seeds.validate()?;
    Ok((kg1, kg2, seeds))
}

fn take_rows(m: &Matrix, start: usize, count: usize) -> Matrix {
    Matrix::from_vec(
        count,
        m.cols,
        m.data[start * m.cols..(start + count) * m.cols].to_vec(),
    )
}

/// Write a dataset directory that [`load_dataset`] reads back to the
/// same structures (given the same ingest options).
pub fn save_dataset(
    root: &Path,
    kg1: &MultiModalKG,
    kg2: &MultiModalKG,
    seeds: &SeedAlignments,
) -> Result<(), DataError> {
    std::fs::create_dir_all(root).map_err(|e| DataError::Io {
        path: root.display().to_string(),
        source: e,
    })?;
    let io_err = |path: &Path| {
        let p = path.display().to_string();
        move |e| DataError::Io {
            path: p.clone(),
            source: e,
        }
    };

    let write_graph = |kg: &MultiModalKG, suffix: &str| -> Result<(), DataError> {
        let ent_path = root.join(format!("ent_ids_{suffix}"));
        let mut f = BufWriter::new(File::create(&ent_path).map_err(io_err(&ent_path))?);
        for i in 0..kg.entity_count {
            writeln!(f, "{i}\te{i}").map_err(io_err(&ent_path))?;
        }
        f.flush().map_err(io_err(&ent_path))?;

        let tri_path = root.join(format!("triples_{suffix}"));
        let mut f = BufWriter::new(File::create(&tri_path).map_err(io_err(&tri_path))?);
        for &(h, r, t) in &kg.triples {
            writeln!(f, "{h}\t{r}\t{t}").map_err(io_err(&tri_path))?;
        }
        f.flush().map_err(io_err(&tri_path))?;

        let attr_path = root.join(format!("attrs_{suffix}"));
        let mut f = BufWriter::new(File::create(&attr_path).map_err(io_err(&attr_path))?);
        for i in 0..kg.entity_count {
            let cols: Vec<String> = (0..kg.attr_features.cols)
                .filter(|&c| kg.attr_features.get(i, c) != 0.0)
                .map(|c| format!("t{c:06}"))
                .collect();
            if !cols.is_empty() {
                writeln!(f, "e{i}\t{}", cols.join("\t")).map_err(io_err(&attr_path))?;
            }
        }
        f.flush().map_err(io_err(&attr_path))?;

        let vis_path = root.join(format!("visual_{suffix}.bin"));
        let present: Vec<usize> = (0..kg.entity_count)
            .filter(|&i| kg.visual_present[i])
            .collect();
        if !present.is_empty() {
            let mut f = BufWriter::new(File::create(&vis_path).map_err(io_err(&vis_path))?);
            f.write_u32::<LittleEndian>(present.len() as u32)
                .map_err(io_err(&vis_path))?;
            f.write_u32::<LittleEndian>(kg.visual_features.cols as u32)
                .map_err(io_err(&vis_path))?;
            for &i in &present {
                f.write_u32::<LittleEndian>(i as u32).map_err(io_err(&vis_path))?;
                for &v in kg.visual_features.row(i) {
                    f.write_f32::<LittleEndian>(v as f32).map_err(io_err(&vis_path))?;
                }
            }
            f.flush().map_err(io_err(&vis_path))?;
        }
        Ok(())
    };
    write_graph(kg1, "1")?;
    write_graph(kg2, "2")?;

    let ill_path = root.join("ill_ent_ids");
    let mut f = BufWriter::new(File::create(&ill_path).map_err(io_err(&ill_path))?);
    for &(l, r) in &seeds.pairs {
        writeln!(f, "{l}\t{r}").map_err(io_err(&ill_path))?;
    }
    f.flush().map_err(io_err(&ill_path))?;
    Ok(())
}
