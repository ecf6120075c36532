# Pipeline stages package
