use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::scene::{render_scene, Color, Scene, SceneObject, ShapeKind, SizeClass};
use crate::correlation::keyword_enum;
use crate::error::{Error, Result};
use crate::kv;
use crate::targets::GroundTruthBox;
use crate::tensor::Tensor;
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Extreme {
    Leftmost,
    Rightmost,
    Topmost,
    Bottommost,
}
keyword_enum!(Extreme {
    Leftmost => "leftmost",
    Rightmost => "rightmost",
    Topmost => "topmost",
    Bottommost => "bottommost",
});

impl Extreme {
    pub const ALL: [Extreme; 4] = [
        Extreme::Leftmost,
        Extreme::Rightmost,
        Extreme::Topmost,
        Extreme::Bottommost,
    ];

    /// Signed key that is smallest for the extreme object.
    fn key(self, o: &SceneObject) -> f64 {
        let (x, y) = o.center();
        match self {
            Extreme::Leftmost => x,
            Extreme::Rightmost => -x,
            Extreme::Topmost => y,
            Extreme::Bottommost => -y,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
}

impl Relation {
    pub const ALL: [Relation; 4] = [
        Relation::LeftOf,
        Relation::RightOf,
        Relation::Above,
        Relation::Below,
    ];

    pub fn words(self) -> &'static str {
        match self {
            Relation::LeftOf => "left of",
            Relation::RightOf => "right of",
            Relation::Above => "above",
            Relation::Below => "below",
        }
    }

    /// How far `a` lies in the relation's direction from `b` (positive
    /// when the relation holds).
    fn margin(self, a: &SceneObject, b: &SceneObject) -> f64 {
        let (ax, ay) = a.center();
        let (bx, by) = b.center();
        match self {
            Relation::LeftOf => bx - ax,
            Relation::RightOf => ax - bx,
            Relation::Above => by - ay,
            Relation::Below => ay - by,
        }
    }
}

/// Template families for referring expressions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Attribute,
    Size,
    Location,
    Relation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Expression {
    /// "red circle"
    Attribute { color: Color, kind: ShapeKind },
    /// "large blue square"
    Sized {
        size: SizeClass,
        color: Color,
        kind: ShapeKind,
    },
    /// "leftmost triangle"
    Location { extreme: Extreme, kind: ShapeKind },
    /// "circle left of the square"
    Relation {
        kind: ShapeKind,
        relation: Relation,
        anchor: ShapeKind,
    },
}

impl Expression {
    pub fn family(&self) -> Family {
        match self {
            Expression::Attribute { .. } => Family::Attribute,
            Expression::Sized { .. } => Family::Size,
            Expression::Location { .. } => Family::Location,
            Expression::Relation { .. } => Family::Relation,
        }
    }

    pub fn text(&self) -> String {
        match self {
            Expression::Attribute { color, kind } => format!("{color} {kind}"),
            Expression::Sized { size, color, kind } => format!("{size} {color} {kind}"),
            Expression::Location { extreme, kind } => format!("{extreme} {kind}"),
            Expression::Relation {
                kind,
                relation,
                anchor,
            } => format!("{kind} {} the {anchor}", relation.words()),
        }
    }

    /// Whether object `idx` of `scene` satisfies the expression.
    pub fn matches(&self, scene: &Scene, idx: usize) -> bool {
        let o = &scene.objects[idx];
        match *self {
            Expression::Attribute { color, kind } => o.color == color && o.kind == kind,
            Expression::Sized { size, color, kind } => {
                o.size == size && o.color == color && o.kind == kind
            }
            Expression::Location { extreme, kind } => {
                o.kind == kind
                    && scene
                        .objects
                        .iter()
                        .enumerate()
                        .filter(|&(j, p)| j != idx && p.kind == kind)
                        .all(|(_, p)| extreme.key(o) < extreme.key(p))
            }
            Expression::Relation {
                kind,
                relation,
                anchor,
            } => {
                o.kind == kind
                    && scene
                        .objects
                        .iter()
                        .enumerate()
                        .any(|(j, b)| j != idx && b.kind == anchor && relation.margin(o, b) > 0.0)
            }
        }
    }

    /// Indices of all objects the expression describes.
    pub fn referents(&self, scene: &Scene) -> Vec<usize> {
        (0..scene.objects.len())
            .filter(|&i| self.matches(scene, i))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub small_extent: (usize, usize),
    pub large_extent: (usize, usize),
    pub attribute: bool,
    pub size: bool,
    pub location: bool,
    pub relation: bool,
    /// Minimum separation, in pixels, between the referent and the runner-up
    /// for location and relation templates.
    pub margin: f64,
    /// Minimum empty border between object cells.
    pub gap: usize,
    pub max_attempts: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            image_size: 64,
            min_objects: 2,
            max_objects: 5,
            small_extent: (8, 11),
            large_extent: (14, 20),
            attribute: true,
            size: false,
            location: true,
            relation: false,
            margin: 4.0,
            gap: 2,
            max_attempts: 200,
        }
    }
}

impl GeneratorConfig {
    pub fn families(&self) -> Vec<Family> {
        [
            (self.attribute, Family::Attribute),
            (self.size, Family::Size),
            (self.location, Family::Location),
            (self.relation, Family::Relation),
        ]
        .into_iter()
        .filter_map(|(on, f)| on.then_some(f))
        .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.families().is_empty() {
            return bad("at least one template family must be enabled");
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad("object counts must satisfy 1 <= min_objects <= max_objects");
        }
        for (lo, hi) in [self.small_extent, self.large_extent] {
            if lo < 3 || lo > hi || hi >= self.image_size {
                return bad("extent ranges must satisfy 3 <= lo <= hi < image_size");
            }
        }
        if self.max_attempts == 0 {
            return bad("max_attempts must be positive");
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let b = |v: bool| if v { "true" } else { "false" };
        format!(
            "image_size = {}\nmin_objects = {}\nmax_objects = {}\nsmall_extent = {} {}\n\
             large_extent = {} {}\nattribute = {}\nsize = {}\nlocation = {}\nrelation = {}\n\
             margin = {}\ngap = {}\nmax_attempts = {}\n",
            self.image_size,
            self.min_objects,
            self.max_objects,
            self.small_extent.0,
            self.small_extent.1,
            self.large_extent.0,
            self.large_extent.1,
            b(self.attribute),
            b(self.size),
            b(self.location),
            b(self.relation),
            self.margin,
            self.gap,
            self.max_attempts,
        )
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        Self::from_entries(kv::parse(text, path)?, path)
    }

    pub(crate) fn from_entries(entries: Vec<kv::Entry>, path: &Path) -> Result<Self> {
        let mut c = GeneratorConfig::default();
        for e in entries {
            let range = |e: &kv::Entry| -> Result<(usize, usize)> {
                let parts: Vec<&str> = e.value.split_whitespace().collect();
                match parts[..] {
                    [a, b] => Ok((
                        a.parse().map_err(|_| range_err(e, path))?,
                        b.parse().map_err(|_| range_err(e, path))?,
                    )),
                    _ => Err(range_err(e, path)),
                }
            };
            match e.key.as_str() {
                "image_size" => c.image_size = kv::parse_value(&e, path)?,
                "min_objects" => c.min_objects = kv::parse_value(&e, path)?,
                "max_objects" => c.max_objects = kv::parse_value(&e, path)?,
                "small_extent" => c.small_extent = range(&e)?,
                "large_extent" => c.large_extent = range(&e)?,
                "attribute" => c.attribute = kv::parse_value(&e, path)?,
                "size" => c.size = kv::parse_value(&e, path)?,
                "location" => c.location = kv::parse_value(&e, path)?,
                "relation" => c.relation = kv::parse_value(&e, path)?,
                "margin" => c.margin = kv::parse_value(&e, path)?,
                "gap" => c.gap = kv::parse_value(&e, path)?,
                "max_attempts" => c.max_attempts = kv::parse_value(&e, path)?,
                other => {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        line: e.line,
                        msg: format!("unknown generator key `{other}`"),
                    })
                }
            }
        }
        c.validate()?;
        Ok(c)
    }
}

fn range_err(e: &kv::Entry, path: &Path) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line: e.line,
        msg: format!("`{}` expects two integers", e.key),
    }
}

/// Image, expression and target box: the unit of training and evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub expression: String,
    pub target: GroundTruthBox,
}

/// A sample together with the scene it was rendered from.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSample {
    pub sample: Sample,
    pub scene: Scene,
    pub target_index: usize,
    pub expression: Expression,
}

pub fn object_box(o: &SceneObject) -> GroundTruthBox {
    let [x1, y1, x2, y2] = o.pixel_bounds();
    GroundTruthBox::from_corners(x1 as f64, y1 as f64, x2 as f64, y2 as f64)
}

fn place_objects(rng: &mut ChaCha8Rng, cfg: &GeneratorConfig, seed: u64) -> Option<Scene> {
    let n = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(n);
    for _ in 0..n {
        let kind = ShapeKind::ALL[rng.random_range(0..3)];
        let color = Color::ALL[rng.random_range(0..Color::ALL.len())];
        let size = if rng.random_bool(0.5) {
            SizeClass::Small
        } else {
            SizeClass::Large
        };
        let (lo, hi) = match size {
            SizeClass::Small => cfg.small_extent,
            SizeClass::Large => cfg.large_extent,
        };
        let extent = rng.random_range(lo..=hi);
        let span = cfg.image_size - extent;
        let mut placed = None;
        for _ in 0..50 {
            let cand = SceneObject {
                kind,
                color,
                size,
                x0: rng.random_range(0..=span),
                y0: rng.random_range(0..=span),
                extent,
            };
            if objects.iter().all(|o| !cand.too_close(o, cfg.gap)) {
                placed = Some(cand);
                break;
            }
        }
        objects.push(placed?);
    }
    Some(Scene {
        objects,
        width: cfg.image_size,
        height: cfg.image_size,
        seed,
    })
}

/// Candidate expression of `family` for object `idx`, honoring the
/// configured margins. Uniqueness is checked by the caller.
fn realize(
    family: Family,
    scene: &Scene,
    idx: usize,
    cfg: &GeneratorConfig,
    rng: &mut ChaCha8Rng,
) -> Option<Expression> {
    let o = &scene.objects[idx];
    match family {
        Family::Attribute => Some(Expression::Attribute {
            color: o.color,
            kind: o.kind,
        }),
        Family::Size => Some(Expression::Sized {
            size: o.size,
            color: o.color,
            kind: o.kind,
        }),
        Family::Location => {
            let mut dirs = Extreme::ALL;
            dirs.shuffle(rng);
            dirs.into_iter()
                .find(|&ex| {
                    scene
                        .objects
                        .iter()
                        .enumerate()
                        .filter(|&(j, p)| j != idx && p.kind == o.kind)
                        .all(|(_, p)| ex.key(p) - ex.key(o) >= cfg.margin)
                })
                .map(|extreme| Expression::Location {
                    extreme,
                    kind: o.kind,
                })
        }
        Family::Relation => {
            let mut options = Vec::new();
            for (j, b) in scene.objects.iter().enumerate() {
                let anchor_unique = scene.objects.iter().filter(|p| p.kind == b.kind).count() == 1;
                if j == idx || b.kind == o.kind || !anchor_unique {
                    continue;
                }
                for rel in Relation::ALL {
                    if rel.margin(o, b) >= cfg.margin {
                        options.push(Expression::Relation {
                            kind: o.kind,
                            relation: rel,
                            anchor: b.kind,
                        });
                    }
                }
            }
            options.choose(rng).copied()
        }
    }
}

/// Every expression (over the enabled families) that singles out exactly
/// one object, as `(object index, expression)`.
pub fn unique_expressions(scene: &Scene, cfg: &GeneratorConfig) -> Vec<(usize, Expression)> {
    let mut out = Vec::new();
    for idx in 0..scene.objects.len() {
        for family in cfg.families() {
            let mut cands = Vec::new();
            match family {
                Family::Location => {
                    for ex in Extreme::ALL {
                        cands.push(Expression::Location {
                            extreme: ex,
                            kind: scene.objects[idx].kind,
                        });
                    }
                }
                Family::Relation => {
                    let o = &scene.objects[idx];
                    for b in &scene.objects {
                        for rel in Relation::ALL {
                            cands.push(Expression::Relation {
                                kind: o.kind,
                                relation: rel,
                                anchor: b.kind,
                            });
                        }
                    }
                }
                Family::Attribute | Family::Size => {
                    let mut rng = ChaCha8Rng::seed_from_u64(0);
                    cands.extend(realize(family, scene, idx, cfg, &mut rng));
                }
            }
            for e in cands {
                let fresh = !out.iter().any(|(i, x)| *i == idx && *x == e);
                if fresh && e.referents(scene) == [idx] && margin_holds(&e, scene, idx, cfg) {
                    out.push((idx, e));
                }
            }
        }
    }
    out
}

fn margin_holds(e: &Expression, scene: &Scene, idx: usize, cfg: &GeneratorConfig) -> bool {
    let o = &scene.objects[idx];
    match *e {
        Expression::Location { extreme, kind } => scene
            .objects
            .iter()
            .enumerate()
            .filter(|&(j, p)| j != idx && p.kind == kind)
            .all(|(_, p)| extreme.key(p) - extreme.key(o) >= cfg.margin),
        Expression::Relation {
            relation, anchor, ..
        } => {
            let anchors: Vec<&SceneObject> =
                scene.objects.iter().filter(|p| p.kind == anchor).collect();
            anchors.len() == 1 && relation.margin(o, anchors[0]) >= cfg.margin
        }
        _ => true,
    }
}

/// Deterministically generates one sample from `seed`.
pub fn generate_sample(seed: u64, cfg: &GeneratorConfig) -> Result<GeneratedSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..cfg.max_attempts {
        let Some(scene) = place_objects(&mut rng, cfg, seed) else {
            continue;
        };
        let mut families = cfg.families();
        families.shuffle(&mut rng);
        let mut order: Vec<usize> = (0..scene.objects.len()).collect();
        order.shuffle(&mut rng);
        for &family in &families {
            for &idx in &order {
                let Some(expr) = realize(family, &scene, idx, cfg, &mut rng) else {
                    continue;
                };
                if expr.referents(&scene) != [idx] {
                    continue;
                }
                let sample = Sample {
                    image: render_scene(&scene),
                    expression: expr.text(),
                    target: object_box(&scene.objects[idx]),
                };
                return Ok(GeneratedSample {
                    sample,
                    scene,
                    target_index: idx,
                    expression: expr,
                });
            }
        }
    }
    Err(Error::Generation {
        seed,
        msg: format!(
            "no uniquely describable scene within {} attempts",
            cfg.max_attempts
        ),
    })
}
