# Core package: data model, local polynomial engine, simulation, reports
