# Run registry, audit log and snapshot store
