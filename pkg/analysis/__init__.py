# Analyses: rdmc, rdmcplot and rdms pipelines
