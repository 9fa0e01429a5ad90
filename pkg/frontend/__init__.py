# command line frontend
