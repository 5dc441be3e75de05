//! Connected change regions and per-sample shape statistics.
//!
//! Regions are 8-connected. A region's perimeter counts every pixel edge
//! shared with a background pixel or the image border.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Region count at or below which a sample counts as "few".
pub const DEFAULT_FEW_THRESHOLD: usize = 4;

/// Region labels `1..=count`, `0` for background, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Labels {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
    pub count: usize,
}

fn check_mask(mask: &[u8], width: usize, height: usize) -> Result<()> {
    if mask.len() != width * height {
        return Err(Error::Shape(format!(
            "mask has {} pixels, expected {width}×{height}",
            mask.len()
        )));
    }
    if let Some(i) = mask.iter().position(|&v| v > 1) {
        return Err(Error::Input(format!("mask value {} at index {i} is not 0 or 1", mask[i])));
    }
    Ok(())
}

/// 8-connected labelling; labels follow the row-major order of each
/// region's first pixel.
pub fn connected_components(mask: &[u8], width: usize, height: usize) -> Result<Labels> {
    check_mask(mask, width, height)?;
    let mut labels = vec![0u32; mask.len()];
    let mut count = 0u32;
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if mask[start] == 0 || labels[start] != 0 {
            continue;
        }
        count += 1;
        labels[start] = count;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (y, x) = ((p / width) as isize, (p % width) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= height as isize || nx >= width as isize {
                        continue;
                    }
                    let q = ny as usize * width + nx as usize;
                    if mask[q] == 1 && labels[q] == 0 {
                        labels[q] = count;
                        stack.push(q);
                    }
                }
            }
        }
    }
    Ok(Labels {
        width,
        height,
        labels,
        count: count as usize,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub area: usize,
    pub perimeter: usize,
    /// `perimeter / area`.
    pub complexity: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Few,
    Many,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleStats {
    pub region_count: usize,
    pub category: Category,
    pub area_ratio: f64,
    pub regions: Vec<Region>,
    pub complexities: Vec<f64>,
    pub mean_complexity: Option<f64>,
    /// Population variance; reported for "many" samples only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub complexity_variance: Option<f64>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn population_variance(v: &[f64]) -> Option<f64> {
    let m = mean(v)?;
    Some(v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64)
}

pub fn region_stats(mask: &[u8], width: usize, height: usize, few_threshold: usize) -> Result<SampleStats> {
    let lab = connected_components(mask, width, height)?;
    let mut regions = vec![
        Region {
            area: 0,
            perimeter: 0,
            complexity: 0.0
        };
        lab.count
    ];
    let on = |y: isize, x: isize| {
        y >= 0 && x >= 0 && (y as usize) < height && (x as usize) < width && mask[y as usize * width + x as usize] == 1
    };
    for (p, &l) in lab.labels.iter().enumerate() {
        if l == 0 {
            continue;
        }
        let (y, x) = ((p / width) as isize, (p % width) as isize);
        let r = &mut regions[l as usize - 1];
        r.area += 1;
        r.perimeter += [(-1, 0), (1, 0), (0, -1), (0, 1)]
            .iter()
            .filter(|(dy, dx)| !on(y + dy, x + dx))
            .count();
    }
    for r in &mut regions {
        r.complexity = r.perimeter as f64 / r.area as f64;
    }
    let changed: usize = regions.iter().map(|r| r.area).sum();
    let complexities: Vec<f64> = regions.iter().map(|r| r.complexity).collect();
    let category = if lab.count <= few_threshold {
        Category::Few
    } else {
        Category::Many
    };
    Ok(SampleStats {
        region_count: lab.count,
        category,
        area_ratio: changed as f64 / mask.len() as f64,
        mean_complexity: mean(&complexities),
        complexity_variance: match category {
            Category::Many => population_variance(&complexities),
            Category::Few => None,
        },
        regions,
        complexities,
    })
}

/// One binary mask with a display name.
#[derive(Clone, Debug)]
pub struct NamedMask {
    pub name: String,
    pub width: usize,
    pub height: usize,
    pub mask: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub name: String,
    #[serde(flatten)]
    pub stats: SampleStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub samples: usize,
    pub mean_area_ratio: Option<f64>,
    pub mean_complexity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_complexity_variance: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub threshold: usize,
    pub samples: Vec<SampleRow>,
    /// `(area_ratio, mean_complexity)` of each "few" sample.
    pub few_points: Vec<(f64, f64)>,
    /// `(complexity_variance, mean_complexity)` of each "many" sample.
    pub many_points: Vec<(f64, f64)>,
    pub few: GroupSummary,
    pub many: GroupSummary,
}

fn group(rows: &[&SampleRow]) -> GroupSummary {
    let col = |f: &dyn Fn(&SampleStats) -> Option<f64>| -> Vec<f64> { rows.iter().filter_map(|r| f(&r.stats)).collect() };
    GroupSummary {
        samples: rows.len(),
        mean_area_ratio: mean(&col(&|s| Some(s.area_ratio))),
        mean_complexity: mean(&col(&|s| s.mean_complexity)),
        mean_complexity_variance: mean(&col(&|s| s.complexity_variance)),
    }
}

/// Splits samples at `threshold` regions and summarizes each side.
///
/// Samples without any region have no complexity and are left out of the
/// scatter points.
pub fn dataset_summary(masks: &[NamedMask], threshold: usize) -> Result<DatasetSummary> {
    if masks.is_empty() {
        return Err(Error::Input("dataset summary needs at least one mask".into()));
    }
    let samples = masks
        .iter()
        .map(|m| {
            region_stats(&m.mask, m.width, m.height, threshold)
                .map(|stats| SampleRow { name: m.name.clone(), stats })
                .map_err(|e| Error::Input(format!("{}: {e}", m.name)))
        })
        .collect::<Result<Vec<_>>>()?;
    let few: Vec<&SampleRow> = samples.iter().filter(|r| r.stats.category == Category::Few).collect();
    let many: Vec<&SampleRow> = samples.iter().filter(|r| r.stats.category == Category::Many).collect();
    let few_points = few
        .iter()
        .filter_map(|r| Some((r.stats.area_ratio, r.stats.mean_complexity?)))
        .collect();
    let many_points = many
        .iter()
        .filter_map(|r| Some((r.stats.complexity_variance?, r.stats.mean_complexity?)))
        .collect();
    Ok(DatasetSummary {
        threshold,
        few: group(&few),
        many: group(&many),
        few_points,
        many_points,
        samples,
    })
}
