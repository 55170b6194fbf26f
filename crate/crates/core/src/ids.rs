//! Grammar engine for ideographic description sequences: radical trees,
//! prefix-token parsing and serialization, stroke expansion and lexicon
//! management.
//!
//! A character class is a tree whose internal nodes are layout operators
//! and whose leaves are radicals. The prefix traversal of that tree plus
//! a trailing END token is the class's IDS.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::Error;
use crate::Result;

/// Layout combinators forming internal tree nodes. A subset of the twelve
/// standard structures; the inventory is data-driven so more can be added.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StructureOp {
    /// left-right
    H2,
    /// top-bottom
    V2,
    /// left-mid-right
    H3,
    /// top-mid-bottom
    V3,
    /// full surround
    Enc,
}

pub const ALL_OPS: [StructureOp; 5] = [
    StructureOp::H2,
    StructureOp::V2,
    StructureOp::H3,
    StructureOp::V3,
    StructureOp::Enc,
];

impl StructureOp {
    pub fn arity(self) -> usize {
        match self {
            StructureOp::H2 | StructureOp::V2 | StructureOp::Enc => 2,
            StructureOp::H3 | StructureOp::V3 => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            StructureOp::H2 => "H2",
            StructureOp::V2 => "V2",
            StructureOp::H3 => "H3",
            StructureOp::V3 => "V3",
            StructureOp::Enc => "ENC",
        }
    }

    pub fn index(self) -> usize {
        match self {
            StructureOp::H2 => 0,
            StructureOp::V2 => 1,
            StructureOp::H3 => 2,
            StructureOp::V3 => 3,
            StructureOp::Enc => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RadicalId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StrokeId(pub usize);

/// Radical tree: the structural decomposition of one character class.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum IdsTree {
    Leaf(RadicalId),
    Node(StructureOp, Vec<IdsTree>),
}

impl IdsTree {
    pub fn depth(&self) -> usize {
        match self {
            IdsTree::Leaf(_) => 1,
            IdsTree::Node(_, ch) => 1 + ch.iter().map(|c| c.depth()).max().unwrap_or(0),
        }
    }

    pub fn leaf_count(&self) -> usize {
        match self {
            IdsTree::Leaf(_) => 1,
            IdsTree::Node(_, ch) => ch.iter().map(|c| c.leaf_count()).sum(),
        }
    }

    pub fn node_count(&self) -> usize {
        match self {
            IdsTree::Leaf(_) => 0,
            IdsTree::Node(_, ch) => 1 + ch.iter().map(|c| c.node_count()).sum::<usize>(),
        }
    }

    /// Leaves in left-to-right order.
    pub fn leaves(&self) -> Vec<RadicalId> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves(&self, out: &mut Vec<RadicalId>) {
        match self {
            IdsTree::Leaf(r) => out.push(*r),
            IdsTree::Node(_, ch) => ch.iter().for_each(|c| c.collect_leaves(out)),
        }
    }
}

/// A token of the IDS alphabet. Class tokens exist for the character-level
/// decomposition mode; BOS/PAD are decoder-side specials.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Token {
    Op(StructureOp),
    Radical(RadicalId),
    Class(usize),
    End,
    Pad,
    Bos,
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Op(op) => write!(f, "{}", op.name()),
            Token::Radical(r) => write!(f, "r{}", r.0),
            Token::Class(c) => write!(f, "c{}", c),
            Token::End => write!(f, "END"),
            Token::Pad => write!(f, "PAD"),
            Token::Bos => write!(f, "BOS"),
        }
    }
}

impl Token {
    pub fn from_str(s: &str) -> Result<Token> {
        match s {
            "H2" => return Ok(Token::Op(StructureOp::H2)),
            "V2" => return Ok(Token::Op(StructureOp::V2)),
            "H3" => return Ok(Token::Op(StructureOp::H3)),
            "V3" => return Ok(Token::Op(StructureOp::V3)),
            "ENC" => return Ok(Token::Op(StructureOp::Enc)),
            "END" => return Ok(Token::End),
            "PAD" => return Ok(Token::Pad),
            "BOS" => return Ok(Token::Bos),
            _ => {}
        }
        if let Some(rest) = s.strip_prefix('r') {
            if let Ok(n) = rest.parse::<usize>() {
                return Ok(Token::Radical(RadicalId(n)));
            }
        }
        if let Some(rest) = s.strip_prefix('c') {
            if let Ok(n) = rest.parse::<usize>() {
                return Ok(Token::Class(n));
            }
        }
        Err(Error::UnknownToken(s.to_string()))
    }
}

/// Parse a prefix token sequence (without the trailing END) into its unique
/// tree. Rejects arity underflow, trailing tokens and non-tree tokens.
pub fn parse_ids(tokens: &[Token]) -> Result<IdsTree> {
    let mut pos = 0usize;
    let tree = parse_prefix(tokens, &mut pos)?;
    if pos != tokens.len() {
        return Err(Error::MalformedIds(format!(
            "{} trailing token(s) after position {}",
            tokens.len() - pos,
            pos
        )));
    }
    Ok(tree)
}

fn parse_prefix(tokens: &[Token], pos: &mut usize) -> Result<IdsTree> {
    let tok = tokens
        .get(*pos)
        .ok_or_else(|| Error::MalformedIds("unexpected end of sequence".into()))?;
    *pos += 1;
    match tok {
        Token::Radical(r) => Ok(IdsTree::Leaf(*r)),
        Token::Op(op) => {
            let mut children = Vec::with_capacity(op.arity());
            for _ in 0..op.arity() {
                children.push(parse_prefix(tokens, pos)?);
            }
            Ok(IdsTree::Node(*op, children))
        }
        other => Err(Error::MalformedIds(format!(
            "token `{}` not allowed inside an IDS body",
            other
        ))),
    }
}

/// Preorder token list plus trailing END.
pub fn serialize_ids(tree: &IdsTree) -> Vec<Token> {
    let mut out = Vec::with_capacity(tree.node_count() + tree.leaf_count() + 1);
    serialize_into(tree, &mut out);
    out.push(Token::End);
    out
}

fn serialize_into(tree: &IdsTree, out: &mut Vec<Token>) {
    match tree {
        IdsTree::Leaf(r) => out.push(Token::Radical(*r)),
        IdsTree::Node(op, ch) => {
            out.push(Token::Op(*op));
            ch.iter().for_each(|c| serialize_into(c, out));
        }
    }
}

pub fn ids_string(tree: &IdsTree) -> String {
    serialize_ids(tree)
        .iter()
        .map(|t| t.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecompositionLevel {
    Character,
    Radical,
    Stroke,
}

impl DecompositionLevel {
    pub fn from_str(s: &str) -> Result<Self> {
        match s {
            "character" => Ok(Self::Character),
            "radical" => Ok(Self::Radical),
            "stroke" => Ok(Self::Stroke),
            other => Err(Error::UnknownToken(other.to_string())),
        }
    }
}

/// Ordered class inventory plus the radical-to-stroke table.
///
/// Class ids are contiguous from 0. Duplicate radical-level IDS strings are
/// rejected at load; stroke-level collisions are allowed (resolution by
/// lowest class id is the caller's concern).
#[derive(Debug, Clone)]
pub struct Lexicon {
    entries: Vec<(IdsTree, String)>,
    radical_strokes: Vec<Vec<StrokeId>>,
    stroke_count: usize,
}

impl Lexicon {
    pub fn new(
        entries: Vec<(IdsTree, String)>,
        radical_strokes: Vec<Vec<StrokeId>>,
        stroke_count: usize,
    ) -> Result<Self> {
        let lex = Lexicon {
            entries,
            radical_strokes,
            stroke_count,
        };
        lex.validate()?;
        Ok(lex)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen: BTreeMap<String, usize> = BTreeMap::new();
        for (cid, (tree, _)) in self.entries.iter().enumerate() {
            for r in tree.leaves() {
                if r.0 >= self.radical_strokes.len() {
                    return Err(Error::UnknownRadical(r.0));
                }
            }
            let key = ids_string(tree);
            if let Some(&prev) = seen.get(&key) {
                return Err(Error::DuplicateIds(prev, cid, key));
            }
            seen.insert(key, cid);
        }
        for strokes in &self.radical_strokes {
            for s in strokes {
                if s.0 >= self.stroke_count {
                    return Err(Error::UnknownToken(format!("s{}", s.0)));
                }
            }
        }
        Ok(())
    }

    pub fn class_count(&self) -> usize {
        self.entries.len()
    }

    pub fn radical_count(&self) -> usize {
        self.radical_strokes.len()
    }

    pub fn stroke_count(&self) -> usize {
        self.stroke_count
    }

    pub fn tree(&self, class_id: usize) -> Result<&IdsTree> {
        self.entries
            .get(class_id)
            .map(|(t, _)| t)
            .ok_or(Error::UnknownClass(class_id))
    }

    pub fn name(&self, class_id: usize) -> Result<&str> {
        self.entries
            .get(class_id)
            .map(|(_, n)| n.as_str())
            .ok_or(Error::UnknownClass(class_id))
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> {
        0..self.entries.len()
    }

    /// Concatenation of leaf stroke lists in left-to-right leaf order;
    /// structure operators contribute no tokens.
    pub fn expand_strokes(&self, tree: &IdsTree) -> Result<Vec<StrokeId>> {
        let mut out = Vec::new();
        for r in tree.leaves() {
            let strokes = self
                .radical_strokes
                .get(r.0)
                .ok_or(Error::UnknownRadical(r.0))?;
            out.extend_from_slice(strokes);
        }
        Ok(out)
    }

    pub fn radical_strokes(&self, r: RadicalId) -> Result<&[StrokeId]> {
        self.radical_strokes
            .get(r.0)
            .map(|v| v.as_slice())
            .ok_or(Error::UnknownRadical(r.0))
    }

    /// Token sequence for a class at the requested decomposition level.
    /// Stroke tokens are mapped onto radical token slots would collide, so
    /// stroke mode returns raw StrokeIds via `Token::Class` — instead we
    /// keep strokes in their own integer space and expose them through
    /// `stroke_token_sequence`.
    pub fn tokens_for_level(
        &self,
        class_id: usize,
        level: DecompositionLevel,
    ) -> Result<Vec<Token>> {
        let tree = self.tree(class_id)?;
        Ok(match level {
            DecompositionLevel::Character => vec![Token::Class(class_id), Token::End],
            DecompositionLevel::Radical => serialize_ids(tree),
            DecompositionLevel::Stroke => {
                let mut toks: Vec<Token> = self
                    .expand_strokes(tree)?
                    .into_iter()
                    // strokes share the radical slot space, offset past real radicals
                    .map(|s| Token::Radical(RadicalId(self.radical_strokes.len() + s.0)))
                    .collect();
                toks.push(Token::End);
                toks
            }
        })
    }

    /// Count of classes in `subset` whose tree contains each radical
    /// (per-class presence counted once).
    pub fn radical_frequencies(&self, subset: &[usize]) -> Result<BTreeMap<RadicalId, usize>> {
        let mut counts = BTreeMap::new();
        for &cid in subset {
            let tree = self.tree(cid)?;
            let mut present: Vec<RadicalId> = tree.leaves();
            present.sort();
            present.dedup();
            for r in present {
                *counts.entry(r).or_insert(0) += 1;
            }
        }
        Ok(counts)
    }

    /// Token-id layout: structure ops, then radicals, then stroke slots,
    /// then class tokens, then END/PAD/BOS.
    pub fn token_index(&self, tok: Token) -> usize {
        let nr = self.radical_strokes.len() + self.stroke_count;
        match tok {
            Token::Op(op) => op.index(),
            Token::Radical(r) => ALL_OPS.len() + r.0,
            Token::Class(c) => ALL_OPS.len() + nr + c,
            Token::End => ALL_OPS.len() + nr + self.entries.len(),
            Token::Pad => ALL_OPS.len() + nr + self.entries.len() + 1,
            Token::Bos => ALL_OPS.len() + nr + self.entries.len() + 2,
        }
    }

    pub fn vocab_size(&self) -> usize {
        ALL_OPS.len() + self.radical_strokes.len() + self.stroke_count + self.entries.len() + 3
    }

    pub fn end_index(&self) -> usize {
        self.token_index(Token::End)
    }

    /// TSV: `class_id<TAB>name<TAB>space-separated tokens (prefix IDS, no END)`.
    pub fn save(&self, lexicon_path: &Path, strokes_path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(lexicon_path)?);
        for (cid, (tree, name)) in self.entries.iter().enumerate() {
            let toks = serialize_ids(tree);
            let body = toks[..toks.len() - 1]
                .iter()
                .map(|t| t.to_string())
                .collect::<Vec<_>>()
                .join(" ");
            writeln!(f, "{}\t{}\t{}", cid, name, body)?;
        }
        let mut f = std::io::BufWriter::new(std::fs::File::create(strokes_path)?);
        for (rid, strokes) in self.radical_strokes.iter().enumerate() {
            let body = strokes
                .iter()
                .map(|s| format!("s{}", s.0))
                .collect::<Vec<_>>()
                .join(" ");
            writeln!(f, "r{}\t{}", rid, body)?;
        }
        Ok(())
    }

    pub fn load(lexicon_path: &Path, strokes_path: &Path) -> Result<Self> {
        let lex_name = lexicon_path.display().to_string();
        let text = std::fs::read_to_string(lexicon_path)?;
        let mut entries = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(Error::parse(&lex_name, ln + 1, "expected 3 tab-separated columns"));
            }
            let cid: usize = cols[0]
                .parse()
                .map_err(|_| Error::parse(&lex_name, ln + 1, "bad class id"))?;
            if cid != entries.len() {
                return Err(Error::parse(
                    &lex_name,
                    ln + 1,
                    format!("class ids must be contiguous from 0; got {}", cid),
                ));
            }
            let tokens: Vec<Token> = cols[2]
                .split_whitespace()
                .map(Token::from_str)
                .collect::<Result<_>>()
                .map_err(|e| Error::parse(&lex_name, ln + 1, e.to_string()))?;
            let tree = parse_ids(&tokens)
                .map_err(|e| Error::parse(&lex_name, ln + 1, e.to_string()))?;
            entries.push((tree, cols[1].to_string()));
        }

        let st_name = strokes_path.display().to_string();
        let text = std::fs::read_to_string(strokes_path)?;
        let mut table: BTreeMap<usize, Vec<StrokeId>> = BTreeMap::new();
        let mut max_stroke = 0usize;
        for (ln, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 2 {
                return Err(Error::parse(&st_name, ln + 1, "expected 2 tab-separated columns"));
            }
            let rid = match Token::from_str(cols[0]) {
                Ok(Token::Radical(r)) => r.0,
                _ => return Err(Error::parse(&st_name, ln + 1, "bad radical token")),
            };
            let mut strokes = Vec::new();
            for t in cols[1].split_whitespace() {
                let sid = t
                    .strip_prefix('s')
                    .and_then(|n| n.parse::<usize>().ok())
                    .ok_or_else(|| Error::parse(&st_name, ln + 1, format!("bad stroke token `{}`", t)))?;
                max_stroke = max_stroke.max(sid + 1);
                strokes.push(StrokeId(sid));
            }
            table.insert(rid, strokes);
        }
        let radical_count = table.keys().max().map(|m| m + 1).unwrap_or(0);
        let mut radical_strokes = vec![Vec::new(); radical_count];
        for (rid, strokes) in table {
            radical_strokes[rid] = strokes;
        }
        Lexicon::new(entries, radical_strokes, max_stroke)
    }

    /// SHA-256 over the canonical serialization, hex-encoded.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        for (cid, (tree, name)) in self.entries.iter().enumerate() {
            hasher.update(format!("{}\t{}\t{}\n", cid, name, ids_string(tree)));
        }
        for (rid, strokes) in self.radical_strokes.iter().enumerate() {
            let body = strokes
                .iter()
                .map(|s| s.0.to_string())
                .collect::<Vec<_>>()
                .join(",");
            hasher.update(format!("r{}\t{}\n", rid, body));
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{:02x}", b))
            .collect()
    }
}

/// Seeded random tree with the given radical inventory and depth cap.
pub fn random_tree<R: Rng>(rng: &mut R, radicals: usize, max_depth: usize) -> IdsTree {
    if max_depth <= 1 || rng.gen_bool(0.35) {
        return IdsTree::Leaf(RadicalId(rng.gen_range(0..radicals)));
    }
    let op = ALL_OPS[rng.gen_range(0..ALL_OPS.len())];
    let children = (0..op.arity())
        .map(|_| random_tree(rng, radicals, max_depth - 1))
        .collect();
    IdsTree::Node(op, children)
}

/// Generate a lexicon of `classes` distinct random trees plus a stroke table.
/// Stroke inventory: 5 categories x 3 instances.
pub fn generate_lexicon(classes: usize, radicals: usize, max_depth: usize, seed: u64) -> Lexicon {
    let stroke_count = 15;
    let mut rng = crate::seed::rng(crate::seed::derive(seed, "lexicon"));
    let mut seen = std::collections::HashSet::new();
    let mut entries = Vec::with_capacity(classes);
    while entries.len() < classes {
        // bias away from bare leaves so most classes are compositional
        let tree = if entries.len() < radicals {
            IdsTree::Leaf(RadicalId(entries.len()))
        } else {
            random_tree(&mut rng, radicals, max_depth)
        };
        if matches!(tree, IdsTree::Leaf(_)) && entries.len() >= radicals {
            continue;
        }
        let key = ids_string(&tree);
        if seen.insert(key) {
            let name = format!("glyph{:04}", entries.len());
            entries.push((tree, name));
        }
    }
    let radical_strokes = (0..radicals)
        .map(|rid| {
            let mut r = crate::seed::rng(crate::seed::derive(seed, &format!("strokes{}", rid)));
            let n = r.gen_range(2..=4);
            (0..n).map(|_| StrokeId(r.gen_range(0..stroke_count))).collect()
        })
        .collect();
    Lexicon::new(entries, radical_strokes, stroke_count).expect("generated lexicon is valid")
}
