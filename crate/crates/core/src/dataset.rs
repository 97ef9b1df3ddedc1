//! Subjects and splits, loaded from a dataset directory or built in memory.

use std::path::Path;

use crate::dpm::{Band, BandPair};
use crate::error::{contract_err, Error, Result};
use crate::io::{load_volume, read_tsr};
use crate::phantom::{generate, split_sizes, subject_id, subject_spec, DatasetIndex, Phantom, PhantomSpec};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// One paired OCT/OCTA acquisition with its ground-truth projection maps.
#[derive(Clone, Debug)]
pub struct Subject {
    pub id: String,
    /// `[D, H, W]` OCT volume.
    pub oct: Tensor,
    pub octa: Option<Tensor>,
    /// Normalized `[D, W]` ground-truth maps.
    pub gt: BandPair,
    pub octa_gt: Option<BandPair>,
    /// `[D, 3, W]` boundary positions when known.
    pub truth_curves: Option<Tensor>,
}

fn optional_tsr(path: &Path) -> Result<Option<Tensor>> {
    if path.exists() {
        read_tsr(path).map(Some)
    } else {
        Ok(None)
    }
}

fn band_pair(dir: &Path, prefix: &str) -> Result<Option<BandPair>> {
    let b2 = optional_tsr(&dir.join(format!("{prefix}_{}.tsr", Band::B2)))?;
    let b3 = optional_tsr(&dir.join(format!("{prefix}_{}.tsr", Band::B3)))?;
    Ok(match (b2, b3) {
        (Some(b2), Some(b3)) => Some(BandPair { b2, b3 }),
        _ => None,
    })
}

impl Subject {
    pub fn from_phantom(id: &str, ph: &Phantom) -> Self {
        Self {
            id: id.to_string(),
            oct: ph.oct.clone(),
            octa: Some(ph.octa.clone()),
            gt: ph.truth.gt_pm.clone(),
            octa_gt: Some(ph.truth.octa_gt_pm.clone()),
            truth_curves: Some(ph.truth.curves.clone()),
        }
    }

    /// Reads a subject directory (`oct/`, optional `octa/`, `gt_pm_b{2,3}.tsr`,
    /// optional `octa_gt_pm_b{2,3}.tsr` and `truth_curves.tsr`).
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let (meta, oct) = load_volume(dir.join("oct"))?;
        let octa = if dir.join("octa").exists() {
            Some(load_volume(dir.join("octa"))?.1)
        } else {
            None
        };
        let gt = band_pair(dir, "gt_pm")?.ok_or_else(|| {
            Error::Consistency(format!("{} lacks gt_pm_b2.tsr / gt_pm_b3.tsr", dir.display()))
        })?;
        let subject = Self {
            id: meta.subject_id,
            oct,
            octa,
            gt,
            octa_gt: band_pair(dir, "octa_gt_pm")?,
            truth_curves: optional_tsr(&dir.join("truth_curves.tsr"))?,
        };
        subject.check()?;
        Ok(subject)
    }

    fn check(&self) -> Result<()> {
        let [d, _, w] = *self.oct.dims() else {
            return Err(Error::Consistency(format!("{}: OCT volume is not 3-D", self.id)));
        };
        let maps = [Some(&self.gt), self.octa_gt.as_ref()];
        for pair in maps.into_iter().flatten() {
            for band in Band::ALL {
                if pair.get(band).dims() != [d, w] {
                    return Err(Error::Consistency(format!(
                        "{}: {band} map {:?} does not match volume {:?}",
                        self.id,
                        pair.get(band).dims(),
                        self.oct.dims()
                    )));
                }
            }
        }
        if let Some(o) = &self.octa {
            if o.dims() != self.oct.dims() {
                return Err(Error::Consistency(format!("{}: OCTA extents differ from OCT", self.id)));
            }
        }
        if let Some(c) = &self.truth_curves {
            if c.dims() != [d, 3, w] {
                return Err(Error::Consistency(format!("{}: truth curves {:?}", self.id, c.dims())));
            }
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.oct.dims()[0]
    }
}

/// Subjects grouped by split.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub train: Vec<Subject>,
    pub val: Vec<Subject>,
    pub test: Vec<Subject>,
}

impl Dataset {
    /// Loads every split listed in `dataset.json` under `root`.
    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        let index = DatasetIndex::load(root)?;
        let split = |name: &str, ids: &[String]| -> Result<Vec<Subject>> {
            ids.iter()
                .map(|id| Subject::load(DatasetIndex::subject_dir(root, name, id)))
                .collect()
        };
        Ok(Self {
            train: split("train", &index.train)?,
            val: split("val", &index.val)?,
            test: split("test", &index.test)?,
        })
    }

    /// Same subjects and split as [`crate::phantom::export_dataset`], kept in memory.
    pub fn phantom(n: usize, base: &PhantomSpec) -> Result<Self> {
        let (n_train, n_val, _) = split_sizes(n)?;
        let mut ids: Vec<String> = (0..n).map(subject_id).collect();
        Rng::new(base.seed, "split").shuffle(&mut ids);
        let make = |ids: &[String]| -> Result<Vec<Subject>> {
            let mut ids = ids.to_vec();
            ids.sort();
            ids.iter()
                .map(|id| Ok(Subject::from_phantom(id, &generate(&subject_spec(base, id))?)))
                .collect()
        };
        Ok(Self {
            train: make(&ids[..n_train])?,
            val: make(&ids[n_train..n_train + n_val])?,
            test: make(&ids[n_train + n_val..])?,
        })
    }

    /// B-scan extents shared by all subjects.
    pub fn extents(&self) -> Result<(usize, usize)> {
        let mut all = self.train.iter().chain(&self.val).chain(&self.test);
        let first = all
            .next()
            .ok_or_else(|| contract_err!("dataset has no subjects"))?;
        let hw = (first.oct.dims()[1], first.oct.dims()[2]);
        for s in all {
            if (s.oct.dims()[1], s.oct.dims()[2]) != hw {
                return Err(Error::Consistency(format!(
                    "{} has B-scans {:?}, expected {hw:?}",
                    s.id,
                    &s.oct.dims()[1..]
                )));
            }
        }
        Ok(hw)
    }
}
