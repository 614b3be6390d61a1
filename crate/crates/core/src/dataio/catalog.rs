//! Catalog CSV files.
//!
//! `users.csv` is `user_id,<features...>`, `ads.csv` is `ad_id,<features...>`
//! and `labels.csv` is `user_id,ad_id,rating` with one row per cell. Feature
//! columns prefixed `c_` are categorical and one-hot encoded; `n_` columns are
//! numeric and min-max scaled to [0, 1] over the file.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use crate::env::Catalog;
use crate::error::{Error, Result};

/// Default star threshold: ratings at or above it count as clicks.
pub const DEFAULT_RATING_THRESHOLD: f64 = 4.0;

struct FeatureTable {
    ids: Vec<String>,
    names: Vec<String>,
    values: Vec<f64>,
}

fn parse_error(line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        line: line as usize,
        message: message.into(),
    }
}

fn read_features(path: &Path, id_column: &str) -> Result<FeatureTable> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.get(0) != Some(id_column) {
        return Err(parse_error(1, format!("{}: first column must be {id_column}", path.display())));
    }
    let columns: Vec<String> = headers.iter().skip(1).map(str::to_owned).collect();
    for c in &columns {
        if !(c.starts_with("c_") || c.starts_with("n_")) {
            return Err(parse_error(
                1,
                format!("{}: feature column {c:?} needs a c_ or n_ prefix", path.display()),
            ));
        }
    }

    let mut ids = Vec::new();
    let mut raw: Vec<Vec<String>> = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != columns.len() + 1 {
            return Err(parse_error(line, format!("expected {} fields, got {}", columns.len() + 1, rec.len())));
        }
        ids.push(rec[0].to_owned());
        raw.push(rec.iter().skip(1).map(str::to_owned).collect());
    }
    let mut seen = BTreeSet::new();
    if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
        return Err(Error::Integrity(format!("{}: duplicate id {dup:?}", path.display())));
    }

    // Encode column by column, then interleave into rows.
    let mut names = Vec::new();
    let mut encoded: Vec<Vec<f64>> = Vec::new();
    for (j, col) in columns.iter().enumerate() {
        if col.starts_with("c_") {
            let levels: BTreeSet<&str> = raw.iter().map(|r| r[j].as_str()).collect();
            for level in levels {
                names.push(format!("{col}={level}"));
                encoded.push(raw.iter().map(|r| (r[j] == level) as u8 as f64).collect());
            }
        } else {
            let mut vals = Vec::with_capacity(raw.len());
            for (i, r) in raw.iter().enumerate() {
                let v: f64 = r[j].trim().parse().map_err(|_| {
                    parse_error(i as u64 + 2, format!("column {col}: {:?} is not a number", r[j]))
                })?;
                if !v.is_finite() {
                    return Err(parse_error(i as u64 + 2, format!("column {col}: non-finite value")));
                }
                vals.push(v);
            }
            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for v in &mut vals {
                *v = if hi > lo { (*v - lo) / (hi - lo) } else { 0.0 };
            }
            names.push(col.clone());
            encoded.push(vals);
        }
    }
    let mut values = Vec::with_capacity(ids.len() * names.len());
    for i in 0..ids.len() {
        values.extend(encoded.iter().map(|c| c[i]));
    }
    Ok(FeatureTable { ids, names, values })
}

/// Load a catalog from the three CSV files; labels are `rating >= threshold`.
pub fn load_catalog(
    users_path: impl AsRef<Path>,
    ads_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    rating_threshold: f64,
) -> Result<Catalog> {
    let users = read_features(users_path.as_ref(), "user_id")?;
    let ads = read_features(ads_path.as_ref(), "ad_id")?;
    let user_index: HashMap<&str, usize> =
        users.ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let ad_index: HashMap<&str, usize> = ads.ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();

    let (nu, na) = (users.ids.len(), ads.ids.len());
    let mut labels = vec![0u8; nu * na];
    let mut filled = vec![false; nu * na];
    let mut reader = csv::Reader::from_path(labels_path.as_ref())?;
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["user_id", "ad_id", "rating"] {
        return Err(parse_error(1, "labels header must be user_id,ad_id,rating"));
    }
    for rec in reader.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 3 {
            return Err(parse_error(line, "expected 3 fields"));
        }
        let u = *user_index
            .get(&rec[0])
            .ok_or_else(|| Error::Integrity(format!("line {line}: unknown user {:?}", &rec[0])))?;
        let a = *ad_index
            .get(&rec[1])
            .ok_or_else(|| Error::Integrity(format!("line {line}: unknown ad {:?}", &rec[1])))?;
        let rating: f64 = rec[2]
            .trim()
            .parse()
            .map_err(|_| parse_error(line, format!("rating {:?} is not a number", &rec[2])))?;
        let cell = u * na + a;
        if filled[cell] {
            return Err(Error::Integrity(format!("line {line}: duplicate cell ({}, {})", &rec[0], &rec[1])));
        }
        filled[cell] = true;
        labels[cell] = (rating >= rating_threshold) as u8;
    }
    let missing = filled.iter().filter(|&&f| !f).count();
    if missing > 0 {
        return Err(Error::Integrity(format!(
            "label matrix is not full: {missing} of {} user-ad cells missing",
            nu * na
        )));
    }

    let catalog = Catalog {
        user_ids: users.ids,
        ad_ids: ads.ids,
        user_feature_names: users.names,
        ad_feature_names: ads.names,
        user_features: users.values,
        ad_features: ads.values,
        holdout: vec![false; labels.len()],
        labels,
        truth_ctr: None,
    };
    catalog.validate()?;
    Ok(catalog)
}

/// Load `users.csv`, `ads.csv`, `labels.csv` and, when present, the
/// `truth.csv` ground-truth sidecar from one directory.
pub fn load_catalog_dir(dir: impl AsRef<Path>, rating_threshold: f64) -> Result<Catalog> {
    let dir = dir.as_ref();
    let mut catalog = load_catalog(
        dir.join("users.csv"),
        dir.join("ads.csv"),
        dir.join("labels.csv"),
        rating_threshold,
    )?;
    let truth = dir.join("truth.csv");
    if truth.exists() {
        attach_truth(&mut catalog, &truth)?;
    }
    Ok(catalog)
}

/// Read a `user_id,ad_id,ctr` ground-truth file into the catalog.
pub fn attach_truth(catalog: &mut Catalog, path: &Path) -> Result<()> {
    let user_index: HashMap<&str, usize> =
        catalog.user_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let ad_index: HashMap<&str, usize> =
        catalog.ad_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let na = catalog.ads();
    let mut truth = vec![f64::NAN; catalog.users() * na];
    let mut reader = csv::Reader::from_path(path)?;
    for rec in reader.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let (Some(&u), Some(&a)) = (user_index.get(&rec[0]), ad_index.get(&rec[1])) else {
            return Err(Error::Integrity(format!("line {line}: unknown cell in truth file")));
        };
        truth[u * na + a] = rec[2]
            .trim()
            .parse()
            .map_err(|_| parse_error(line, "ctr is not a number"))?;
    }
    if truth.iter().any(|t| t.is_nan()) {
        return Err(Error::Integrity("ground-truth file does not cover every cell".into()));
    }
    catalog.truth_ctr = Some(truth);
    catalog.validate()
}

fn feature_header(name: &str) -> String {
    // one-hot columns are written back as plain 0/1 numeric columns
    match name.strip_prefix("c_") {
        Some(rest) => format!("n_{rest}"),
        None => name.to_owned(),
    }
}

fn write_features(path: &Path, id_column: &str, ids: &[String], names: &[String], values: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![id_column.to_owned()];
    header.extend(names.iter().map(|n| feature_header(n)));
    w.write_record(&header)?;
    let d = names.len();
    for (i, id) in ids.iter().enumerate() {
        let mut row = vec![id.clone()];
        row.extend(values[i * d..(i + 1) * d].iter().map(|v| format!("{v:?}")));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Write a catalog as CSV files into `dir` (which must exist). Clicks are
/// written as rating 5 and non-clicks as rating 1.
pub fn write_catalog(catalog: &Catalog, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    write_features(
        &dir.join("users.csv"),
        "user_id",
        &catalog.user_ids,
        &catalog.user_feature_names,
        &catalog.user_features,
    )?;
    write_features(
        &dir.join("ads.csv"),
        "ad_id",
        &catalog.ad_ids,
        &catalog.ad_feature_names,
        &catalog.ad_features,
    )?;
    let mut w = csv::Writer::from_path(dir.join("labels.csv"))?;
    w.write_record(["user_id", "ad_id", "rating"])?;
    for (u, uid) in catalog.user_ids.iter().enumerate() {
        for (a, aid) in catalog.ad_ids.iter().enumerate() {
            let rating = if catalog.label(u, a) == 1 { "5" } else { "1" };
            w.write_record([uid.as_str(), aid.as_str(), rating])?;
        }
    }
    w.flush()?;
    if let Some(truth) = &catalog.truth_ctr {
        let mut w = csv::Writer::from_path(dir.join("truth.csv"))?;
        w.write_record(["user_id", "ad_id", "ctr"])?;
        for (u, uid) in catalog.user_ids.iter().enumerate() {
            for (a, aid) in catalog.ad_ids.iter().enumerate() {
                w.write_record([uid.clone(), aid.clone(), format!("{:?}", truth[u * catalog.ads() + a])])?;
            }
        }
        w.flush()?;
    }
    Ok(())
}

/// Write the holdout cells as `user_id,ad_id`.
pub fn write_holdout(catalog: &Catalog, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["user_id", "ad_id"])?;
    for (u, a) in catalog.holdout_cells() {
        w.write_record([&catalog.user_ids[u], &catalog.ad_ids[a]])?;
    }
    w.flush()?;
    Ok(())
}

/// Replace the catalog's holdout mask with the cells listed in `path`.
pub fn read_holdout(catalog: &mut Catalog, path: impl AsRef<Path>) -> Result<()> {
    let user_index: HashMap<String, usize> =
        catalog.user_ids.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
    let ad_index: HashMap<String, usize> =
        catalog.ad_ids.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
    let na = catalog.ads();
    let mut mask = vec![false; catalog.users() * na];
    let text = fs::read_to_string(path)?;
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    for rec in reader.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let (Some(&u), Some(&a)) = (user_index.get(&rec[0]), ad_index.get(&rec[1])) else {
            return Err(Error::Integrity(format!("line {line}: unknown holdout cell")));
        };
        mask[u * na + a] = true;
    }
    catalog.holdout = mask;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{synth_generate, SynthSpec};

    fn write(dir: &Path, name: &str, body: &str) {
        fs::write(dir.join(name), body).unwrap();
    }

    fn tiny(dir: &Path) {
        write(dir, "users.csv", "user_id,c_gender,n_age\nu1,f,20\nu2,m,40\nu3,x,30\n");
        write(dir, "ads.csv", "ad_id,n_price\na1,1.5\na2,3.5\n");
        write(
            dir,
            "labels.csv",
            "user_id,ad_id,rating\nu1,a1,5\nu1,a2,1\nu2,a1,4\nu2,a2,3\nu3,a1,2\nu3,a2,4\n",
        );
    }

    #[test]
    fn loads_and_encodes() {
        let dir = tempfile::tempdir().unwrap();
        tiny(dir.path());
        let c = load_catalog_dir(dir.path(), DEFAULT_RATING_THRESHOLD).unwrap();
        assert_eq!(c.user_feature_names, vec!["c_gender=f", "c_gender=m", "c_gender=x", "n_age"]);
        for u in 0..3 {
            assert_eq!(c.user_row(u)[..3].iter().sum::<f64>(), 1.0);
        }
        assert_eq!(c.user_row(0)[3], 0.0);
        assert_eq!(c.user_row(1)[3], 1.0);
        assert_eq!(c.user_row(2)[3], 0.5);
        assert_eq!(c.labels, vec![1, 0, 1, 0, 0, 1]);
    }

    #[test]
    fn missing_cell_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        tiny(dir.path());
        write(dir.path(), "labels.csv", "user_id,ad_id,rating\nu1,a1,5\nu1,a2,1\nu2,a1,4\nu2,a2,3\nu3,a1,2\n");
        assert!(matches!(load_catalog_dir(dir.path(), 4.0), Err(Error::Integrity(_))));
    }

    #[test]
    fn unknown_user_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        tiny(dir.path());
        write(dir.path(), "labels.csv", "user_id,ad_id,rating\nzz,a1,5\n");
        assert!(matches!(load_catalog_dir(dir.path(), 4.0), Err(Error::Integrity(_))));
    }

    #[test]
    fn bad_number_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        tiny(dir.path());
        write(dir.path(), "ads.csv", "ad_id,n_price\na1,1.5\na2,cheap\n");
        match load_catalog_dir(dir.path(), 4.0) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn synthetic_catalog_round_trips_through_csv() {
        let spec = SynthSpec {
            users: 6,
            ads: 9,
            user_dim: 3,
            ad_dim: 2,
            ..SynthSpec::default()
        };
        let c = synth_generate(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_catalog(&c, dir.path()).unwrap();
        let back = load_catalog_dir(dir.path(), DEFAULT_RATING_THRESHOLD).unwrap();
        assert_eq!(back, c);

        let h = c.split_holdout(2, 5).unwrap();
        write_holdout(&h, dir.path().join("holdout.csv")).unwrap();
        let mut again = back;
        read_holdout(&mut again, dir.path().join("holdout.csv")).unwrap();
        assert_eq!(again.holdout, h.holdout);
    }
}
