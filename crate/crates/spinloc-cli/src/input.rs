use std::fs::File;
use std::path::Path;

use spinloc::Error;

use crate::table::io_context;

pub fn open(path: &Path) -> Result<File, Error> {
    File::open(path).map_err(|e| io_context(e, path))
}

/// Reads the named numeric columns from a headed CSV file, in the order asked.
/// Extra columns are ignored.
pub fn numeric_columns(path: &Path, names: &[&str]) -> Result<Vec<Vec<f64>>, Error> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(open(path)?);
    let parse = |line: u64, message: String| Error::Parse { line, message };
    let headers = rdr.headers().map_err(|e| parse(1, e.to_string()))?.clone();
    let index: Vec<usize> = names
        .iter()
        .map(|n| {
            headers
                .iter()
                .position(|h| h == *n)
                .ok_or_else(|| parse(1, format!("missing column `{n}`")))
        })
        .collect::<Result<_, _>>()?;
    let mut columns = vec![Vec::new(); names.len()];
    for record in rdr.records() {
        let record = record.map_err(|e| parse(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        for ((col, &i), name) in columns.iter_mut().zip(&index).zip(names) {
            let field = record.get(i).unwrap_or("");
            let value: f64 = field
                .parse()
                .map_err(|_| parse(line, format!("column `{name}`: `{field}` is not a number")))?;
            col.push(value);
        }
    }
    if columns[0].is_empty() {
        return Err(parse(1, "no data rows".into()));
    }
    Ok(columns)
}
