//! Dataset manifest: the line-oriented index tying scenes, instance masks,
//! and per-SKU patches together.
//!
//! Grammar (one record per line, fields space-separated, paths relative to
//! the manifest's directory, `#` starts a comment):
//!
//! ```text
//! seed <u64>
//! config_hash <8 hex digits>
//! image_size <height> <width>
//! seen <sku_id>...
//! unseen <sku_id>...
//! patch <sku_id> <path.ppm>
//! scene <path.ppm> <easy|hard> <num_instances>
//! instance <sku_id> <x0> <y0> <x1> <y1> <mask_path.pgm>
//! ```
//!
//! Each `scene` line is followed by exactly `num_instances` `instance`
//! lines. Boxes are tight pixel boxes, `[x0, x1)` exclusive on the right.
//! A scene whose instances are all seen SKUs is a training scene; scenes
//! containing any unseen SKU belong to the test split.

use super::{compose_scene, extract_patches, generate_sku, Clutter, Scene};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::raster::{Gray8, Rgb8};
use crate::rng::SplitMix64;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestInstance {
    pub sku_id: u32,
    /// Tight pixel box `[x0, y0, x1, y1)`.
    pub bbox: [usize; 4],
    pub mask_path: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestScene {
    pub path: String,
    pub clutter: Clutter,
    pub instances: Vec<ManifestInstance>,
}

impl ManifestScene {
    pub fn has_unseen(&self, unseen: &[u32]) -> bool {
        self.instances.iter().any(|i| unseen.contains(&i.sku_id))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetManifest {
    pub seed: u64,
    pub config_hash: String,
    pub image_size: (usize, usize),
    pub seen: Vec<u32>,
    pub unseen: Vec<u32>,
    pub patches: BTreeMap<u32, Vec<String>>,
    pub scenes: Vec<ManifestScene>,
    /// Directory every path is relative to (set on load/save).
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("seed {}\n", self.seed));
        s.push_str(&format!("config_hash {}\n", self.config_hash));
        s.push_str(&format!("image_size {} {}\n", self.image_size.0, self.image_size.1));
        let join = |ids: &[u32]| ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ");
        s.push_str(&format!("seen {}\n", join(&self.seen)));
        s.push_str(&format!("unseen {}\n", join(&self.unseen)));
        for (sku, paths) in &self.patches {
            for p in paths {
                s.push_str(&format!("patch {sku} {p}\n"));
            }
        }
        for scene in &self.scenes {
            s.push_str(&format!("scene {} {} {}\n", scene.path, scene.clutter, scene.instances.len()));
            for inst in &scene.instances {
                let [x0, y0, x1, y1] = inst.bbox;
                s.push_str(&format!("instance {} {x0} {y0} {x1} {y1} {}\n", inst.sku_id, inst.mask_path));
            }
        }
        s
    }

    pub fn parse(text: &str, root: &Path) -> Result<DatasetManifest> {
        let mut m = DatasetManifest { root: root.to_path_buf(), ..Default::default() };
        let mut pending_instances = 0usize;
        let bad = |lineno: usize, msg: &str| Error::Input(format!("manifest line {}: {msg}", lineno + 1));
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut f = line.split_whitespace();
            let tag = f.next().unwrap();
            let rest: Vec<&str> = f.collect();
            if tag != "instance" && pending_instances > 0 {
                return Err(bad(ln, "expected an instance line"));
            }
            match tag {
                "seed" => m.seed = rest.first().and_then(|v| v.parse().ok()).ok_or_else(|| bad(ln, "bad seed"))?,
                "config_hash" => m.config_hash = rest.first().ok_or_else(|| bad(ln, "bad hash"))?.to_string(),
                "image_size" => {
                    if rest.len() != 2 {
                        return Err(bad(ln, "image_size needs height and width"));
                    }
                    m.image_size = (
                        rest[0].parse().map_err(|_| bad(ln, "bad height"))?,
                        rest[1].parse().map_err(|_| bad(ln, "bad width"))?,
                    );
                }
                "seen" | "unseen" => {
                    let ids: Vec<u32> = rest
                        .iter()
                        .map(|v| v.parse().map_err(|_| bad(ln, "bad sku id")))
                        .collect::<Result<_>>()?;
                    if tag == "seen" {
                        m.seen = ids;
                    } else {
                        m.unseen = ids;
                    }
                }
                "patch" => {
                    if rest.len() != 2 {
                        return Err(bad(ln, "patch needs sku id and path"));
                    }
                    let sku: u32 = rest[0].parse().map_err(|_| bad(ln, "bad sku id"))?;
                    m.patches.entry(sku).or_default().push(rest[1].to_string());
                }
                "scene" => {
                    if rest.len() != 3 {
                        return Err(bad(ln, "scene needs path, clutter, count"));
                    }
                    pending_instances = rest[2].parse().map_err(|_| bad(ln, "bad instance count"))?;
                    m.scenes.push(ManifestScene {
                        path: rest[0].to_string(),
                        clutter: rest[1].parse()?,
                        instances: Vec::new(),
                    });
                }
                "instance" => {
                    if pending_instances == 0 {
                        return Err(bad(ln, "instance line outside a scene"));
                    }
                    if rest.len() != 6 {
                        return Err(bad(ln, "instance needs sku, box, mask path"));
                    }
                    let nums: Vec<usize> = rest[1..5]
                        .iter()
                        .map(|v| v.parse().map_err(|_| bad(ln, "bad box coordinate")))
                        .collect::<Result<_>>()?;
                    m.scenes.last_mut().unwrap().instances.push(ManifestInstance {
                        sku_id: rest[0].parse().map_err(|_| bad(ln, "bad sku id"))?,
                        bbox: [nums[0], nums[1], nums[2], nums[3]],
                        mask_path: rest[5].to_string(),
                    });
                    pending_instances -= 1;
                }
                other => return Err(bad(ln, &format!("unknown record {other:?}"))),
            }
        }
        if pending_instances > 0 {
            return Err(Error::Input("manifest truncated inside a scene".into()));
        }
        if !m.seen.iter().all(|s| !m.unseen.contains(s)) {
            return Err(Error::Input("seen and unseen SKU sets overlap".into()));
        }
        for scene in &m.scenes {
            for inst in &scene.instances {
                if !m.seen.contains(&inst.sku_id) && !m.unseen.contains(&inst.sku_id) {
                    return Err(Error::Input(format!("scene {} references unlisted sku {}", scene.path, inst.sku_id)));
                }
            }
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<DatasetManifest> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Input(format!("cannot read manifest {}: {e}", path.display())))?;
        let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Self::parse(&text, &root)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Scene indices whose instances are all seen SKUs.
    pub fn train_scene_indices(&self) -> Vec<usize> {
        (0..self.scenes.len()).filter(|&i| !self.scenes[i].has_unseen(&self.unseen)).collect()
    }

    /// Scene indices containing at least one unseen SKU.
    pub fn test_scene_indices(&self) -> Vec<usize> {
        (0..self.scenes.len()).filter(|&i| self.scenes[i].has_unseen(&self.unseen)).collect()
    }

    pub fn load_scene_image(&self, scene: &ManifestScene) -> Result<Rgb8> {
        Rgb8::read_ppm(&self.resolve(&scene.path))
    }

    pub fn load_instance_mask(&self, inst: &ManifestInstance) -> Result<Gray8> {
        Gray8::read_pgm(&self.resolve(&inst.mask_path))
    }

    pub fn load_patches(&self, sku: u32, count: usize) -> Result<Vec<Rgb8>> {
        let Some(paths) = self.patches.get(&sku) else {
            return Err(Error::Input(format!("no patches listed for sku {sku}")));
        };
        if count == 0 || count > paths.len() {
            return Err(Error::Input(format!(
                "requested {count} patches for sku {sku}, manifest lists {}",
                paths.len()
            )));
        }
        paths[..count].iter().map(|p| Rgb8::read_ppm(&self.resolve(p))).collect()
    }

    /// Structural audit: referenced files exist and parse, masks are
    /// pairwise disjoint, boxes are the tight boxes of their masks, and
    /// training scenes contain no unseen SKUs.
    pub fn audit(&self) -> Result<()> {
        for (sku, paths) in &self.patches {
            for p in paths {
                Rgb8::read_ppm(&self.resolve(p)).map_err(|e| Error::Input(format!("sku {sku} patch: {e}")))?;
            }
        }
        for scene in &self.scenes {
            let img = self.load_scene_image(scene)?;
            let mut covered = vec![false; img.w * img.h];
            for inst in &scene.instances {
                let mask = self.load_instance_mask(inst)?;
                if (mask.w, mask.h) != (img.w, img.h) {
                    return Err(Error::Input(format!("{}: mask size mismatch", inst.mask_path)));
                }
                if mask.tight_bbox() != Some(inst.bbox) {
                    return Err(Error::Input(format!(
                        "{}: box {:?} is not the tight box {:?}",
                        inst.mask_path,
                        inst.bbox,
                        mask.tight_bbox()
                    )));
                }
                for (i, &px) in mask.data.iter().enumerate() {
                    if px > 127 {
                        if covered[i] {
                            return Err(Error::Input(format!("{}: overlapping masks", scene.path)));
                        }
                        covered[i] = true;
                    }
                }
            }
        }
        for &i in &self.train_scene_indices() {
            if self.scenes[i].has_unseen(&self.unseen) {
                return Err(Error::Input("unseen SKU leaked into a training scene".into()));
            }
        }
        Ok(())
    }
}

/// Generate the full dataset under `out_dir`: scene/mask/patch files plus
/// `manifest.txt`. Deterministic per `(config, seed)`.
pub fn build_dataset(cfg: &Config, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir.join("scenes"))?;
    std::fs::create_dir_all(out_dir.join("masks"))?;
    std::fs::create_dir_all(out_dir.join("patches"))?;

    let root_rng = SplitMix64::new(seed);
    let assets: Vec<_> = (0..cfg.num_skus as u32).map(|i| generate_sku(seed, i)).collect();
    let seen: Vec<u32> = (0..cfg.num_seen as u32).collect();
    let unseen: Vec<u32> = (cfg.num_seen as u32..cfg.num_skus as u32).collect();

    let mut manifest = DatasetManifest {
        seed,
        config_hash: cfg.hash(),
        image_size: (cfg.image_h, cfg.image_w),
        seen: seen.clone(),
        unseen: unseen.clone(),
        patches: BTreeMap::new(),
        scenes: Vec::new(),
        root: out_dir.to_path_buf(),
    };

    for asset in &assets {
        let patches = extract_patches(asset, cfg.patches_per_sku, root_rng.fork(0xBA7C + asset.sku_id as u64).next_u64(), cfg.patch_size)?;
        let mut paths = Vec::new();
        for (j, p) in patches.iter().enumerate() {
            let rel = format!("patches/sku_{:03}_p{}.ppm", asset.sku_id, j);
            p.write_ppm(&out_dir.join(&rel))?;
            paths.push(rel);
        }
        manifest.patches.insert(asset.sku_id, paths);
    }

    let seen_assets: Vec<_> = assets.iter().filter(|a| seen.contains(&a.sku_id)).cloned().collect();

    let write_scene = |scene: &Scene, idx: usize, manifest: &mut DatasetManifest| -> Result<()> {
        let rel = format!("scenes/scene_{idx:04}.ppm");
        scene.image.write_ppm(&out_dir.join(&rel))?;
        let mut instances = Vec::new();
        for (k, inst) in scene.instances.iter().enumerate() {
            let mask_rel = format!("masks/scene_{idx:04}_inst_{k:02}.pgm");
            inst.mask.write_pgm(&out_dir.join(&mask_rel))?;
            instances.push(ManifestInstance { sku_id: inst.sku_id, bbox: inst.bbox, mask_path: mask_rel });
        }
        manifest.scenes.push(ManifestScene { path: rel, clutter: scene.clutter, instances });
        Ok(())
    };

    // training scenes: seen SKUs only, alternating clutter halves
    for i in 0..cfg.train_scenes {
        let clutter = if i % 2 == 0 { Clutter::Easy } else { Clutter::Hard };
        let scene = compose_retrying(&seen_assets, clutter, cfg, root_rng.fork(0x5CE0 + i as u64), |s| {
            !s.instances.is_empty()
        })?;
        write_scene(&scene, i, &mut manifest)?;
    }

    // test scenes: full SKU pool, must contain an unseen instance
    for i in 0..cfg.test_scenes {
        let clutter = if i % 2 == 0 { Clutter::Easy } else { Clutter::Hard };
        let scene = compose_retrying(&assets, clutter, cfg, root_rng.fork(0x7E57 + i as u64), |s| {
            s.instances.iter().any(|inst| unseen.contains(&inst.sku_id))
        })?;
        write_scene(&scene, cfg.train_scenes + i, &mut manifest)?;
    }

    manifest.save(&out_dir.join("manifest.txt"))?;
    Ok(manifest)
}

fn compose_retrying(
    assets: &[super::SkuAsset],
    clutter: Clutter,
    cfg: &Config,
    mut rng: SplitMix64,
    accept: impl Fn(&Scene) -> bool,
) -> Result<Scene> {
    for _ in 0..64 {
        let scene = compose_scene(assets, clutter, cfg, rng.next_u64())?;
        if accept(&scene) {
            return Ok(scene);
        }
    }
    Err(Error::Numerical("could not compose an acceptable scene in 64 attempts".into()))
}
