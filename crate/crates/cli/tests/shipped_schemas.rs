//! The example schemas under schemas/ must stay parseable and well-formed.

use fairmi::data::DatasetSchema;
use std::path::Path;

fn schemas_dir() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schemas")
}

#[test]
fn all_shipped_schemas_parse_and_validate() {
    let mut seen = 0;
    for entry in std::fs::read_dir(schemas_dir()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "json") {
            let schema = DatasetSchema::from_file(&path)
                .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            assert!(!schema.sensitive.is_empty());
            seen += 1;
        }
    }
    assert_eq!(seen, 3, "expected adult, compas and dutch_census schemas");
}

#[test]
fn adult_schema_declares_the_standard_attribute_set() {
    let schema = DatasetSchema::from_file(&schemas_dir().join("adult.json")).unwrap();
    // 12 declared features plus sex and race as sensitive: 14 attributes.
    assert_eq!(schema.features.len() + schema.sensitive.len(), 14);
    assert_eq!(schema.label, "income");
    assert_eq!(schema.label_values.len(), 2);
    let sex = schema.sensitive_spec("sex").unwrap();
    let race = schema.sensitive_spec("race").unwrap();
    assert_eq!(sex.categories.len(), 2);
    assert_eq!(race.categories.len(), 5);
}

#[test]
fn dutch_schema_declares_eleven_attributes() {
    let schema = DatasetSchema::from_file(&schemas_dir().join("dutch_census.json")).unwrap();
    assert_eq!(schema.features.len() + schema.sensitive.len(), 11);
    assert_eq!(schema.label_values.len(), 2);
}

#[test]
fn compas_schema_is_binary_with_nonbinary_race() {
    let schema = DatasetSchema::from_file(&schemas_dir().join("compas.json")).unwrap();
    assert_eq!(schema.label_values.len(), 2);
    assert!(schema.sensitive_spec("race").unwrap().categories.len() > 2);
}
