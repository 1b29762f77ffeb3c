//! Shared fixtures for unit tests.

/// The census passage used as the worked example throughout the tests.
pub const CENSUS_PASSAGE: &str = "As of the census of 2010, there were 31,894 people, 13,324 households, and 8,201 families residing in the city. The population density was 1,851.1 inhabitants per square mile (714.7/km²). There were 14,057 housing units at an average density of 815.8 per square mile (315.0/km²). The racial makeup of the city was 93.9% White (U.S. Census), 0.3% African American (U.S. Census), 1.7% Native American (U.S. Census), 0.8% Asian (U.S. Census), 0.1% Race (U.S. Census), 0.7% from Race (U.S. Census), and 2.4% from two or more races. Hispanic (U.S. Census) or Latino (U.S. Census) of any race were 2.8% of the population.";

pub const CENSUS_QUESTION: &str =
    "How many more percentage of the population had a racial make-up of White than Asian?";
